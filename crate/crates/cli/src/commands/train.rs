//! Training command: resolves splits and dims from the dataset, streams a
//! JSON-lines epoch log, and saves the best-validation checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};

use label2label::checkpoint;
use label2label::model::ModelConfig;
use label2label::synth::Dataset;
use label2label::train::{train, LoadedSplit, TrainConfig, TrainResult};
use label2label::{Error, Result};

use crate::config::RunConfig;
use crate::hash;

pub struct Trained {
    pub result: TrainResult,
    pub dataset: Dataset,
    pub dataset_digest: String,
}

fn train_config(cfg: &RunConfig, ds: &Dataset, train_split: &LoadedSplit) -> Result<TrainConfig> {
    let first = train_split.images.first().ok_or_else(|| Error::ConfigError {
        detail: "training split is empty".into(),
    })?;
    let model = ModelConfig {
        mode: cfg.mode,
        m: ds.manifest.attributes.len(),
        d: cfg.d,
        heads: cfg.heads,
        aqn_layers: cfg.aqn_layers,
        mlm_layers: cfg.mlm_layers,
        ffn_hidden: cfg.ffn_hidden,
        image_size: first.shape()[0],
        positions: cfg.positions,
        mask_strategy: cfg.mask_strategy,
    };
    Ok(TrainConfig {
        model,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        schedule: cfg.schedule,
        patience: cfg.patience,
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        weighting: cfg.weighting,
        seed: cfg.seed,
        threads: cfg.threads,
    })
}

/// Train per config and write the epoch log plus checkpoint under
/// `cfg.out`. The caller records run.json.
pub fn execute(cfg: &RunConfig) -> Result<Trained> {
    let ds = Dataset::load(&cfg.data.join("manifest.json"))?;
    let train_split = LoadedSplit::load(&ds, "train")?;
    let val_split = LoadedSplit::load(&ds, "val")?;
    let tc = train_config(cfg, &ds, &train_split)?;

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let log_path = cfg.out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut log_err: Option<std::io::Error> = None;

    let result = train(&tc, &train_split, &val_split, |entry| {
        println!(
            "epoch {:>3}  L_total {:.4}  val err {:.4}  val mA {:.4}  lr {:.5}",
            entry.epoch, entry.l_total, entry.val.mean_error, entry.val.mean_accuracy, entry.lr
        );
        let line = serde_json::to_string(entry).expect("epoch log serializes");
        if log_err.is_none() {
            log_err = writeln!(log, "{line}").err();
        }
    })?;
    if log_err.is_none() {
        log_err = log.flush().err();
    }
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }

    checkpoint::save(&result.model, &cfg.out.join("checkpoint"))?;
    let dataset_digest = hash::dataset_digest(&cfg.data, &ds.manifest)?;
    Ok(Trained { result, dataset: ds, dataset_digest })
}

pub fn run(cfg: &RunConfig) -> Result<Trained> {
    let trained = execute(cfg)?;
    println!(
        "best epoch {} at validation mean error {:.4}; checkpoint in {}",
        trained.result.best_epoch,
        trained.result.best_val_error,
        cfg.out.join("checkpoint").display()
    );
    Ok(trained)
}
