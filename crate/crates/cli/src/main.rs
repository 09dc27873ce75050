//! `l2l`: generate synthetic attribute datasets, train the query-network /
//! masked-refiner pipelines, evaluate against the enumerated optimum, sweep
//! ablation axes and export attention maps.
//!
//! Exit codes: 0 success, 2 usage or config or data problems, 3 numerical
//! failure (non-finite loss). Every command writes `run.json` into its
//! output directory; `l2l rerun` replays such a record bit-identically
//! (single-threaded runs).

mod commands;
mod config;
mod hash;
mod pgm;
mod runfile;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use label2label::{Error, Result};

use runfile::RunRecord;

#[derive(Parser)]
#[command(name = "l2l", version, about = "Multi-attribute learning workbench on synthetic correlated-attribute benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset
    Generate(GenerateArgs),
    /// Train a model and save the best-validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Train once per value along one ablation axis and tabulate results
    Sweep(SweepArgs),
    /// Export attention matrices and heatmaps for chosen samples
    ExportAttention(ExportArgs),
    /// Replay a recorded run from its run.json
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of attributes
    #[arg(long)]
    m: usize,
    /// Number of latent factors
    #[arg(long)]
    k: usize,
    /// Label flip probability
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Per-patch occlusion probability
    #[arg(long, default_value_t = 0.3)]
    rho: f64,
    #[arg(long = "image-size", default_value_t = 8)]
    image_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total samples, split 80/10/10; or give explicit --train/--val/--test
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// fc_head | aqn_only | label2label | mlm_no_image | two_stage
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long = "aqn-layers")]
    aqn_layers: Option<usize>,
    #[arg(long = "mlm-layers")]
    mlm_layers: Option<usize>,
    #[arg(long = "ffn-hidden")]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    positions: Option<bool>,
    /// attribute_specific | attribute_agnostic | zero_vector
    #[arg(long = "mask-strategy")]
    mask_strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// constant | cosine | plateau
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    /// Masking probability per pseudo-sentence word
    #[arg(long)]
    alpha: Option<f64>,
    /// Refiner loss weight
    #[arg(long)]
    lambda: Option<f64>,
    /// uniform | exponential
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut list: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                list.push((key.to_string(), v));
            }
        };
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("mode", self.mode.clone());
        push("d", self.d.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("aqn_layers", self.aqn_layers.map(|v| v.to_string()));
        push("mlm_layers", self.mlm_layers.map(|v| v.to_string()));
        push("ffn_hidden", self.ffn_hidden.map(|v| v.to_string()));
        push("positions", self.positions.map(|v| v.to_string()));
        push("mask_strategy", self.mask_strategy.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("momentum", self.momentum.map(|v| v.to_string()));
        push("weight_decay", self.weight_decay.map(|v| v.to_string()));
        push("schedule", self.schedule.clone());
        push("patience", self.patience.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("weighting", self.weighting.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        list
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// alpha | lambda | aqn_layers | mlm_layers | mask_strategy
    #[arg(long)]
    axis: String,
    /// Comma-separated values to sweep
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample ids
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    /// Path to a run.json written by an earlier command
    run: PathBuf,
    /// Write outputs here instead of the recorded directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => {
            let params = commands::generate::Params {
                m: a.m,
                k: a.k,
                eps: a.eps,
                rho: a.rho,
                image_size: a.image_size,
                seed: a.seed,
                n: a.n,
                train: a.train,
                val: a.val,
                test: a.test,
                out: a.out,
            };
            commands::generate::run(&params)?;
            runfile::write(
                &params.out,
                &RunRecord {
                    command: "generate".into(),
                    config: params.to_map(),
                    inputs: BTreeMap::new(),
                },
            )
        }
        Command::Train(a) => {
            let cfg = config::resolve(a.config.as_deref(), &a.overrides())?;
            let trained = commands::train::run(&cfg)?;
            runfile::write(
                &cfg.out,
                &RunRecord {
                    command: "train".into(),
                    config: cfg.to_map(),
                    inputs: BTreeMap::from([("dataset".to_string(), trained.dataset_digest)]),
                },
            )
        }
        Command::Eval(a) => {
            let params = commands::eval::Params {
                checkpoint: a.checkpoint,
                data: a.data,
                split: a.split,
                out: a.out,
            };
            let inputs = commands::eval::run(&params)?;
            runfile::write(
                &params.out,
                &RunRecord {
                    command: "eval".into(),
                    config: params.to_map(),
                    inputs,
                },
            )
        }
        Command::Sweep(a) => {
            let base = config::resolve(a.train.config.as_deref(), &a.train.overrides())?;
            let params = commands::sweep::Params {
                axis: a.axis,
                values: a.values,
                base,
            };
            let inputs = commands::sweep::run(&params)?;
            runfile::write(
                &params.base.out,
                &RunRecord {
                    command: "sweep".into(),
                    config: commands::sweep::config_map(&params),
                    inputs,
                },
            )
        }
        Command::ExportAttention(a) => {
            let params = commands::export::Params {
                checkpoint: a.checkpoint,
                data: a.data,
                samples: a.samples,
                out: a.out,
            };
            let inputs = commands::export::run(&params)?;
            runfile::write(
                &params.out,
                &RunRecord {
                    command: "export-attention".into(),
                    config: params.to_map(),
                    inputs,
                },
            )
        }
        Command::Rerun(a) => rerun(&a),
    }
}

/// Replay a recorded run. Artifacts land in `--out` (or the recorded
/// directory) and the original record is copied along verbatim, so a rerun
/// of a serial run is byte-for-byte comparable.
fn rerun(a: &RerunArgs) -> Result<()> {
    let record = runfile::read(&a.run)?;
    let override_out = |recorded: PathBuf| a.out.clone().unwrap_or(recorded);
    let out_dir = match record.command.as_str() {
        "generate" => {
            let mut p = commands::generate::Params::from_map(&record.config)?;
            p.out = override_out(p.out);
            commands::generate::run(&p)?;
            p.out
        }
        "train" => {
            let mut cfg = config::RunConfig::from_map(&record.config)?;
            cfg.out = override_out(cfg.out);
            commands::train::run(&cfg)?;
            cfg.out
        }
        "eval" => {
            let mut p = commands::eval::Params::from_map(&record.config)?;
            p.out = override_out(p.out);
            commands::eval::run(&p)?;
            p.out
        }
        "sweep" => {
            let mut p = commands::sweep::params_from_map(&record.config)?;
            p.base.out = override_out(p.base.out);
            commands::sweep::run(&p)?;
            p.base.out
        }
        "export-attention" => {
            let mut p = commands::export::Params::from_map(&record.config)?;
            p.out = override_out(p.out);
            commands::export::run(&p)?;
            p.out
        }
        other => {
            return Err(Error::ConfigError {
                detail: format!("run.json records unknown command {other:?}"),
            })
        }
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let target = out_dir.join("run.json");
    if a.run.canonicalize().ok() != target.canonicalize().ok() {
        std::fs::copy(&a.run, &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
