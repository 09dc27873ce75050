//! Evaluation for binary multi-attribute predictions: the label-based mean
//! accuracy, the four example-based set metrics, and per-attribute
//! classification error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything a single evaluation produces. Serialized field order is the
/// declaration order below.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    #[serde(rename = "mA")]
    pub mean_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_error: f64,
    pub per_attribute_error: Vec<f64>,
    pub true_positives: Vec<u64>,
    pub true_negatives: Vec<u64>,
    pub positives: Vec<u64>,
    pub negatives: Vec<u64>,
    pub samples: u64,
}

fn check_shapes(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<usize> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            detail: format!("{} prediction rows vs {} label rows", preds.len(), labels.len()),
        });
    }
    let m = labels[0].len();
    for (i, (p, y)) in preds.iter().zip(labels).enumerate() {
        if p.len() != m || y.len() != m {
            return Err(Error::ShapeMismatch {
                op: "metrics",
                detail: format!("row {i} width {} / {} vs {m}", p.len(), y.len()),
            });
        }
    }
    Ok(m)
}

struct Counts {
    tp: Vec<u64>,
    tn: Vec<u64>,
    pos: Vec<u64>,
    neg: Vec<u64>,
}

fn column_counts(preds: &[Vec<u8>], labels: &[Vec<u8>], m: usize) -> Counts {
    let mut c = Counts {
        tp: vec![0; m],
        tn: vec![0; m],
        pos: vec![0; m],
        neg: vec![0; m],
    };
    for (p, y) in preds.iter().zip(labels) {
        for j in 0..m {
            if y[j] == 1 {
                c.pos[j] += 1;
                if p[j] == 1 {
                    c.tp[j] += 1;
                }
            } else {
                c.neg[j] += 1;
                if p[j] == 0 {
                    c.tn[j] += 1;
                }
            }
        }
    }
    c
}

/// Mean of per-attribute positive and negative accuracy:
/// (1/2M) Σ_j (TP_j/P_j + TN_j/N_j). Columns whose labels are all one value
/// make the ratio undefined and are rejected.
pub fn compute_ma(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<f64> {
    let m = check_shapes(preds, labels)?;
    let c = column_counts(preds, labels, m);
    let mut acc = 0.0;
    for j in 0..m {
        if c.pos[j] == 0 || c.neg[j] == 0 {
            return Err(Error::DegenerateAttribute {
                index: j,
                detail: format!("{} positive, {} negative labels", c.pos[j], c.neg[j]),
            });
        }
        acc += c.tp[j] as f64 / c.pos[j] as f64 + c.tn[j] as f64 / c.neg[j] as f64;
    }
    Ok(acc / (2.0 * m as f64))
}

/// Example-based accuracy, precision, recall over positive-label sets,
/// averaged per sample; F1 is the harmonic mean of the aggregated precision
/// and recall. Empty-set samples score by convention: an empty union counts
/// as a correct sample, an empty prediction set earns precision 0 unless the
/// label set is empty too, and recall mirrors that with the roles swapped.
pub fn compute_instance_metrics(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<(f64, f64, f64, f64)> {
    let m = check_shapes(preds, labels)?;
    let n = preds.len() as f64;
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        let mut inter = 0u64;
        let mut np = 0u64;
        let mut ny = 0u64;
        for j in 0..m {
            if p[j] == 1 {
                np += 1;
            }
            if y[j] == 1 {
                ny += 1;
            }
            if p[j] == 1 && y[j] == 1 {
                inter += 1;
            }
        }
        let union = np + ny - inter;
        acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prec += if np == 0 {
            if ny == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            inter as f64 / np as f64
        };
        rec += if ny == 0 {
            if np == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            inter as f64 / ny as f64
        };
    }
    let (acc, prec, rec) = (acc / n, prec / n, rec / n);
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    Ok((acc, prec, rec, f1))
}

/// Per-attribute classification error 1 − (TP_j + TN_j)/N and its mean.
pub fn per_attribute_error(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<(Vec<f64>, f64)> {
    let m = check_shapes(preds, labels)?;
    let c = column_counts(preds, labels, m);
    let n = preds.len() as f64;
    // 1 − (TP+TN)/N, with the subtraction done in integers so the ratio is
    // exact where N − TP − TN is
    let errors: Vec<f64> = (0..m)
        .map(|j| (preds.len() as u64 - c.tp[j] - c.tn[j]) as f64 / n)
        .collect();
    let mean = errors.iter().sum::<f64>() / m as f64;
    Ok((errors, mean))
}

/// Full report over one prediction/label matrix pair.
pub fn evaluate(preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<MetricReport> {
    let m = check_shapes(preds, labels)?;
    let mean_accuracy = compute_ma(preds, labels)?;
    let (accuracy, precision, recall, f1) = compute_instance_metrics(preds, labels)?;
    let (per_attribute_error, mean_error) = per_attribute_error(preds, labels)?;
    let c = column_counts(preds, labels, m);
    Ok(MetricReport {
        mean_accuracy,
        accuracy,
        precision,
        recall,
        f1,
        mean_error,
        per_attribute_error,
        true_positives: c.tp,
        true_negatives: c.tn,
        positives: c.pos,
        negatives: c.neg,
        samples: preds.len() as u64,
    })
}

/// CSV body for the per-attribute errors: `attribute_name,error` header plus
/// one row per attribute.
pub fn per_attribute_csv(names: &[String], errors: &[f64]) -> String {
    let mut out = String::from("attribute_name,error\n");
    for (name, err) in names.iter().zip(errors) {
        out.push_str(&format!("{name},{err}\n"));
    }
    out
}
