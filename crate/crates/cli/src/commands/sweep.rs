//! Ablation sweep: trains one seeded run per value along a single axis and
//! tabulates test metrics into a CSV. Each sub-run leaves its own
//! artifacts (log, checkpoint, run.json) in a value-named subdirectory.

use std::collections::BTreeMap;

use label2label::{Error, Result};

use crate::commands::{eval, train};
use crate::config::RunConfig;
use crate::runfile::{self, RunRecord};

pub const AXES: [&str; 5] = ["alpha", "lambda", "aqn_layers", "mlm_layers", "mask_strategy"];

pub struct Params {
    pub axis: String,
    pub values: Vec<String>,
    pub base: RunConfig,
}

pub fn run(p: &Params) -> Result<BTreeMap<String, String>> {
    if !AXES.contains(&p.axis.as_str()) {
        return Err(Error::ConfigError {
            detail: format!("axis {:?} is not sweepable; choose one of {}", p.axis, AXES.join(", ")),
        });
    }
    if p.values.is_empty() {
        return Err(Error::ConfigError {
            detail: "sweep needs at least one value".into(),
        });
    }

    let mut csv = String::from("value,mean_error,mA,F1\n");
    let mut dataset_digest = String::new();
    for value in &p.values {
        let mut cfg = p.base.clone();
        cfg.apply(&p.axis, value)?;
        cfg.out = p.base.out.join(format!("{}_{}", p.axis, value));
        println!("--- {} = {value} ---", p.axis);
        let trained = train::run(&cfg)?;
        runfile::write(
            &cfg.out,
            &RunRecord {
                command: "train".into(),
                config: cfg.to_map(),
                inputs: BTreeMap::from([("dataset".to_string(), trained.dataset_digest.clone())]),
            },
        )?;
        let reps = eval::reports(&trained.result.model, &trained.dataset, "test")?;
        eval::write_reports(&cfg.out, &reps, &trained.dataset.manifest.attributes)?;
        csv.push_str(&format!(
            "{value},{},{},{}\n",
            reps.model.mean_error, reps.model.mean_accuracy, reps.model.f1
        ));
        dataset_digest = trained.dataset_digest;
    }

    let path = p.base.out.join("sweep.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    Ok(BTreeMap::from([("dataset".to_string(), dataset_digest)]))
}

pub fn config_map(p: &Params) -> BTreeMap<String, String> {
    let mut map = p.base.to_map();
    map.insert("axis".to_string(), p.axis.clone());
    map.insert("values".to_string(), p.values.join(","));
    map
}

pub fn params_from_map(map: &BTreeMap<String, String>) -> Result<Params> {
    let mut base_map = map.clone();
    let axis = base_map.remove("axis").ok_or_else(|| Error::ConfigError {
        detail: "sweep record lacks axis".into(),
    })?;
    let values = base_map.remove("values").ok_or_else(|| Error::ConfigError {
        detail: "sweep record lacks values".into(),
    })?;
    Ok(Params {
        axis,
        values: values.split(',').map(str::to_string).collect(),
        base: RunConfig::from_map(&base_map)?,
    })
}
