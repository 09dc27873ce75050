//! Attention export: for chosen samples, dump every network's per-head
//! self-attention matrix as JSON (rows labeled attribute=word) and each
//! cross-attention row reshaped onto the feature grid as a PGM heatmap.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use label2label::checkpoint;
use label2label::nn::LayerAttention;
use label2label::synth::Dataset;
use label2label::tensor::Tape;
use label2label::{Error, Result};

use crate::commands::eval::check_compatible;
use crate::hash;
use crate::pgm::write_pgm;

#[derive(Debug, Clone)]
pub struct Params {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub samples: Vec<u64>,
    pub out: PathBuf,
}

impl Params {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let ids: Vec<String> = self.samples.iter().map(u64::to_string).collect();
        BTreeMap::from([
            ("checkpoint".to_string(), self.checkpoint.display().to_string()),
            ("data".to_string(), self.data.display().to_string()),
            ("samples".to_string(), ids.join(",")),
            ("out".to_string(), self.out.display().to_string()),
        ])
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Params> {
        let mut p = Params {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            samples: Vec::new(),
            out: PathBuf::new(),
        };
        for (key, value) in map {
            match key.as_str() {
                "checkpoint" => p.checkpoint = PathBuf::from(value),
                "data" => p.data = PathBuf::from(value),
                "samples" => {
                    p.samples = value
                        .split(',')
                        .map(|s| {
                            s.trim().parse().map_err(|_| Error::ConfigError {
                                detail: format!("sample id {s:?} is not an integer"),
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "out" => p.out = PathBuf::from(value),
                _ => {
                    return Err(Error::ConfigError {
                        detail: format!("unknown export key {key:?}"),
                    })
                }
            }
        }
        Ok(p)
    }
}

#[derive(serde::Serialize)]
struct HeadMatrix {
    head: usize,
    rows: Vec<String>,
    matrix: Vec<Vec<f64>>,
}

#[derive(serde::Serialize)]
struct CrossMaps {
    head: usize,
    grid_h: usize,
    grid_w: usize,
    /// One flattened row-major H×W map per attribute.
    maps: Vec<Vec<f64>>,
}

#[derive(serde::Serialize)]
struct LayerRecord {
    layer: usize,
    self_attention: Vec<HeadMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_attention: Option<Vec<CrossMaps>>,
}

#[derive(serde::Serialize)]
struct NetworkRecord {
    network: &'static str,
    layers: Vec<LayerRecord>,
}

#[derive(serde::Serialize)]
struct SampleRecord {
    sample: u64,
    attributes: Vec<String>,
    /// The thresholded pseudo sentence both networks talk about.
    words: Vec<u8>,
    prediction: Vec<u8>,
    networks: Vec<NetworkRecord>,
}

fn matrix_rows(t: &label2label::Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.to_vec().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn network_record(
    network: &'static str,
    attention: &[LayerAttention],
    rows: &[String],
    grid: (usize, usize),
) -> NetworkRecord {
    let layers = attention
        .iter()
        .enumerate()
        .map(|(layer, la)| LayerRecord {
            layer,
            self_attention: la
                .self_attn
                .iter()
                .enumerate()
                .map(|(head, t)| HeadMatrix {
                    head,
                    rows: rows.to_vec(),
                    matrix: matrix_rows(t),
                })
                .collect(),
            cross_attention: la.cross_attn.as_ref().map(|heads| {
                heads
                    .iter()
                    .enumerate()
                    .map(|(head, t)| CrossMaps {
                        head,
                        grid_h: grid.0,
                        grid_w: grid.1,
                        maps: matrix_rows(t),
                    })
                    .collect()
            }),
        })
        .collect();
    NetworkRecord { network, layers }
}

fn write_heatmaps(out: &Path, id: u64, record: &NetworkRecord, attributes: &[String]) -> Result<()> {
    for layer in &record.layers {
        let Some(cross) = &layer.cross_attention else { continue };
        for maps in cross {
            for (j, map) in maps.maps.iter().enumerate() {
                let name = format!(
                    "sample{id}_{}_layer{}_head{}_{}.pgm",
                    record.network, layer.layer, maps.head, attributes[j]
                );
                write_pgm(&out.join(name), maps.grid_w, maps.grid_h, map)?;
            }
        }
    }
    Ok(())
}

pub fn run(p: &Params) -> Result<BTreeMap<String, String>> {
    if p.samples.is_empty() {
        return Err(Error::ConfigError {
            detail: "export needs at least one sample id".into(),
        });
    }
    let model = checkpoint::load(&p.checkpoint)?;
    let ds = Dataset::load(&p.data.join("manifest.json"))?;
    check_compatible(&model, &ds)?;
    std::fs::create_dir_all(&p.out).map_err(|e| Error::io(&p.out, e))?;

    for &id in &p.samples {
        let image = ds.load_image(id)?;
        image.set_requires_grad(false);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &image, None, model.config.mode.has_refiner())?;
        let aqn = fwd.aqn.as_ref().ok_or_else(|| Error::ConfigError {
            detail: format!("mode {} has no attention to export", model.config.mode.name()),
        })?;

        let rows: Vec<String> = ds
            .manifest
            .attributes
            .iter()
            .zip(&aqn.pseudo_sentence)
            .map(|(name, word)| format!("{name}={word}"))
            .collect();
        let grid = (fwd.features.grid_h, fwd.features.grid_w);
        let mut networks = vec![network_record("aqn", &aqn.attention, &rows, grid)];
        if let Some(mlm) = &fwd.mlm {
            networks.push(network_record("mlm", &mlm.attention, &rows, grid));
        }

        let record = SampleRecord {
            sample: id,
            attributes: ds.manifest.attributes.clone(),
            words: aqn.pseudo_sentence.clone(),
            prediction: fwd.prediction.clone(),
            networks,
        };
        let mut text = serde_json::to_string_pretty(&record).expect("attention serializes");
        text.push('\n');
        let path = p.out.join(format!("sample{id}_attention.json"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for network in &record.networks {
            write_heatmaps(&p.out, id, network, &ds.manifest.attributes)?;
        }
    }
    println!("exported {} sample(s) to {}", p.samples.len(), p.out.display());

    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".to_string(), hash::checkpoint_digest(&p.checkpoint)?);
    inputs.insert("dataset".to_string(), hash::dataset_digest(&p.data, &ds.manifest)?);
    Ok(inputs)
}
