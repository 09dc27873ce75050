//! Run configuration: a flat UTF-8 `key=value` file (with `#` comments)
//! layered under command-line overrides, resolving into one typed struct.
//! The resolved values are echoed verbatim into `run.json`, and feeding
//! them back through this parser reproduces the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use label2label::icmlm::MaskStrategy;
use label2label::model::Mode;
use label2label::train::{ScheduleKind, Weighting};
use label2label::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub mode: Mode,
    pub d: usize,
    pub heads: usize,
    pub aqn_layers: usize,
    pub mlm_layers: usize,
    pub ffn_hidden: usize,
    pub positions: bool,
    pub mask_strategy: MaskStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub patience: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub weighting: Weighting,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            data: PathBuf::new(),
            out: PathBuf::new(),
            mode: Mode::Label2label,
            d: 32,
            heads: 4,
            aqn_layers: 1,
            mlm_layers: 2,
            ffn_hidden: 64,
            positions: true,
            mask_strategy: MaskStrategy::AttributeSpecific,
            epochs: 40,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            patience: 4,
            alpha: 0.1,
            lambda: 1.0,
            weighting: Weighting::Uniform,
            seed: 7,
            threads: 1,
        }
    }
}

fn bad(detail: String) -> Error {
    Error::ConfigError { detail }
}

fn count(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(format!("{key}={value} is not a count")))
}

fn real(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(format!("{key}={value} is not a number")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(format!("{key}={value} must be true or false"))),
    }
}

impl RunConfig {
    /// Set one key. Unknown keys are rejected, which catches config typos
    /// before any work starts.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "mode" => {
                self.mode = Mode::parse(value)
                    .ok_or_else(|| bad(format!("unknown mode {value:?}")))?
            }
            "d" => self.d = count(key, value)?,
            "heads" => self.heads = count(key, value)?,
            "aqn_layers" => self.aqn_layers = count(key, value)?,
            "mlm_layers" => self.mlm_layers = count(key, value)?,
            "ffn_hidden" => self.ffn_hidden = count(key, value)?,
            "positions" => self.positions = flag(key, value)?,
            "mask_strategy" => {
                self.mask_strategy = MaskStrategy::parse(value)
                    .ok_or_else(|| bad(format!("unknown mask strategy {value:?}")))?
            }
            "epochs" => self.epochs = count(key, value)?,
            "batch_size" => self.batch_size = count(key, value)?,
            "lr" => self.lr = real(key, value)?,
            "momentum" => self.momentum = real(key, value)?,
            "weight_decay" => self.weight_decay = real(key, value)?,
            "schedule" => {
                self.schedule = ScheduleKind::parse(value)
                    .ok_or_else(|| bad(format!("unknown schedule {value:?}")))?
            }
            "patience" => self.patience = count(key, value)?,
            "alpha" => self.alpha = real(key, value)?,
            "lambda" => self.lambda = real(key, value)?,
            "weighting" => {
                self.weighting = Weighting::parse(value)
                    .ok_or_else(|| bad(format!("unknown weighting {value:?}")))?
            }
            "seed" => {
                self.seed = value.parse().map_err(|_| bad(format!("seed={value} is not an integer")))?
            }
            "threads" => self.threads = count(key, value)?,
            _ => return Err(bad(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("data", self.data.display().to_string());
        put("out", self.out.display().to_string());
        put("mode", self.mode.name().to_string());
        put("d", self.d.to_string());
        put("heads", self.heads.to_string());
        put("aqn_layers", self.aqn_layers.to_string());
        put("mlm_layers", self.mlm_layers.to_string());
        put("ffn_hidden", self.ffn_hidden.to_string());
        put("positions", self.positions.to_string());
        put("mask_strategy", self.mask_strategy.name().to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("schedule", self.schedule.name().to_string());
        put("patience", self.patience.to_string());
        put("alpha", self.alpha.to_string());
        put("lambda", self.lambda.to_string());
        put("weighting", self.weighting.name().to_string());
        put("seed", self.seed.to_string());
        put("threads", self.threads.to_string());
        map
    }

    /// Rebuild from a run.json config map. No defaults layering and no
    /// environment override: the map is replayed as recorded.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, value) in map {
            cfg.apply(key, value)?;
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn check_paths(&self) -> Result<()> {
        if self.data.as_os_str().is_empty() {
            return Err(bad("dataset path required: set data= in the config or pass --data".into()));
        }
        if self.out.as_os_str().is_empty() {
            return Err(bad("output directory required: set out= in the config or pass --out".into()));
        }
        Ok(())
    }
}

/// Split a config file into key/value pairs. Blank lines and lines whose
/// first non-space character is `#` are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("{origin} line {}: expected key=value, got {line:?}", idx + 1)))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Defaults, then the config file, then command-line overrides, then the
/// `L2L_SEED` environment variable.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in parse_pairs(&text, &path.display().to_string())? {
            cfg.apply(&key, &value)?;
        }
    }
    for (key, value) in overrides {
        cfg.apply(key, value)?;
    }
    if let Ok(seed) = std::env::var("L2L_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| bad(format!("L2L_SEED={seed} is not an integer")))?;
    }
    cfg.check_paths()?;
    Ok(cfg)
}
