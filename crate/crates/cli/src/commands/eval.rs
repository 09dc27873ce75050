//! Evaluation command: scores a checkpoint's final head on one split and,
//! when the dataset carries its generating spec, the enumerated optimum
//! alongside it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use label2label::aqn::readout;
use label2label::checkpoint;
use label2label::metrics::{evaluate, per_attribute_csv, MetricReport};
use label2label::model::Model;
use label2label::synth::{bayes_oracle, occlusion_from_image, Dataset};
use label2label::train::{predictions, LoadedSplit};
use label2label::{Error, Result};

use crate::hash;

#[derive(Debug, Clone)]
pub struct Params {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
}

impl Params {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("checkpoint".to_string(), self.checkpoint.display().to_string()),
            ("data".to_string(), self.data.display().to_string()),
            ("split".to_string(), self.split.clone()),
            ("out".to_string(), self.out.display().to_string()),
        ])
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Params> {
        let mut p = Params {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            split: "test".into(),
            out: PathBuf::new(),
        };
        for (key, value) in map {
            match key.as_str() {
                "checkpoint" => p.checkpoint = PathBuf::from(value),
                "data" => p.data = PathBuf::from(value),
                "split" => p.split = value.clone(),
                "out" => p.out = PathBuf::from(value),
                _ => {
                    return Err(Error::ConfigError {
                        detail: format!("unknown eval key {key:?}"),
                    })
                }
            }
        }
        Ok(p)
    }
}

pub struct SplitReports {
    pub model: MetricReport,
    pub oracle: Option<MetricReport>,
}

pub fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    let m = ds.manifest.attributes.len();
    if model.config.m != m {
        return Err(Error::IncompatibleCheckpoint {
            detail: format!("checkpoint models {} attributes, dataset has {m}", model.config.m),
        });
    }
    Ok(())
}

/// Score the checkpoint's prediction head on a split; modes with a refiner
/// read the refiner's probabilities, the others the single head they have.
pub fn reports(model: &Model, ds: &Dataset, split_name: &str) -> Result<SplitReports> {
    check_compatible(model, ds)?;
    let split = LoadedSplit::load(ds, split_name)?;
    if let Some(image) = split.images.first() {
        if image.shape()[0] != model.config.image_size {
            return Err(Error::IncompatibleCheckpoint {
                detail: format!(
                    "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
                    model.config.image_size,
                    image.shape()[0]
                ),
            });
        }
    }
    let preds = predictions(model, &split, model.config.mode.has_refiner())?;
    let report = evaluate(&preds, &split.labels)?;
    let oracle = match &ds.manifest.spec {
        Some(spec) => {
            let mut oracle_preds = Vec::with_capacity(split.len());
            for (image, labels) in split.images.iter().zip(&split.labels) {
                let occluded = occlusion_from_image(image, spec)?;
                let posterior = bayes_oracle(labels, &occluded, spec)?;
                oracle_preds.push(readout(&posterior));
            }
            Some(evaluate(&oracle_preds, &split.labels)?)
        }
        None => None,
    };
    Ok(SplitReports { model: report, oracle })
}

#[derive(serde::Serialize)]
struct ReportFile<'a> {
    model: &'a MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<&'a MetricReport>,
}

pub fn write_reports(out: &Path, reps: &SplitReports, attributes: &[String]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let file = ReportFile {
        model: &reps.model,
        oracle: reps.oracle.as_ref(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("report serializes");
    text.push('\n');
    let path = out.join("report.json");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let csv = per_attribute_csv(attributes, &reps.model.per_attribute_error);
    let path = out.join("per_attribute.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

fn print_row(tag: &str, r: &MetricReport) {
    println!(
        "{tag:>8}: mean error {:.4}  mA {:.4}  acc {:.4}  prec {:.4}  rec {:.4}  F1 {:.4}",
        r.mean_error, r.mean_accuracy, r.accuracy, r.precision, r.recall, r.f1
    );
}

pub fn run(p: &Params) -> Result<BTreeMap<String, String>> {
    let model = checkpoint::load(&p.checkpoint)?;
    let ds = Dataset::load(&p.data.join("manifest.json"))?;
    let reps = reports(&model, &ds, &p.split)?;
    write_reports(&p.out, &reps, &ds.manifest.attributes)?;

    println!("split {} ({} samples):", p.split, reps.model.samples);
    print_row("model", &reps.model);
    if let Some(oracle) = &reps.oracle {
        print_row("oracle", oracle);
        if oracle.mean_error > reps.model.mean_error {
            eprintln!(
                "warning: model mean error {:.4} beats the enumerated optimum {:.4}; \
                 the dataset spec and images disagree, or the split is tiny",
                reps.model.mean_error, oracle.mean_error
            );
        }
    }

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), hash::checkpoint_digest(&p.checkpoint)?);
    inputs.insert("dataset".to_string(), hash::dataset_digest(&p.data, &ds.manifest)?);
    Ok(inputs)
}
