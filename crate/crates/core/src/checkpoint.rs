//! Checkpoints: a directory holding one binary tensor file per parameter
//! plus a plain-text manifest. The manifest records the model configuration
//! and, per parameter, its file, shape and init scheme, so a load can verify
//! it is restoring into byte-compatible slots.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::icmlm::MaskStrategy;
use crate::model::{Mode, Model, ModelConfig};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST_FILE: &str = "checkpoint.txt";
const FORMAT_LINE: &str = "format=l2l-checkpoint-1";

fn bad(detail: String) -> Error {
    Error::IncompatibleCheckpoint { detail }
}

/// Writes `checkpoint.txt` plus `p0000.l2lt`, `p0001.l2lt`, ... in parameter
/// registration order. Overwrites files already present.
pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &model.config;
    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("model.mode={}\n", c.mode.name()));
    manifest.push_str(&format!("model.m={}\n", c.m));
    manifest.push_str(&format!("model.d={}\n", c.d));
    manifest.push_str(&format!("model.heads={}\n", c.heads));
    manifest.push_str(&format!("model.aqn_layers={}\n", c.aqn_layers));
    manifest.push_str(&format!("model.mlm_layers={}\n", c.mlm_layers));
    manifest.push_str(&format!("model.ffn_hidden={}\n", c.ffn_hidden));
    manifest.push_str(&format!("model.image_size={}\n", c.image_size));
    manifest.push_str(&format!("model.positions={}\n", c.positions));
    manifest.push_str(&format!("model.mask_strategy={}\n", c.mask_strategy.name()));
    for (i, (name, tensor, scheme)) in model.params.iter().enumerate() {
        let file = format!("p{i:04}.l2lt");
        write_tensor(dir.join(&file), tensor)?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("param.{name}={file};{};{scheme}\n", dims.join("x")));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

struct ParamEntry {
    file: String,
    shape: Vec<usize>,
    scheme: String,
}

fn parse_manifest(text: &str) -> Result<(HashMap<String, String>, HashMap<String, ParamEntry>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(FORMAT_LINE) => {}
        other => return Err(bad(format!("unrecognized manifest header {other:?}"))),
    }
    let mut config = HashMap::new();
    let mut params = HashMap::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("manifest line without '=': {line:?}")))?;
        if let Some(name) = key.strip_prefix("model.") {
            config.insert(name.to_string(), value.to_string());
        } else if let Some(name) = key.strip_prefix("param.") {
            let mut fields = value.split(';');
            let entry = (|| {
                let file = fields.next()?.to_string();
                let shape = fields
                    .next()?
                    .split('x')
                    .map(|d| d.parse().ok())
                    .collect::<Option<Vec<usize>>>()?;
                let scheme = fields.next()?.to_string();
                if fields.next().is_some() {
                    return None;
                }
                Some(ParamEntry { file, shape, scheme })
            })()
            .ok_or_else(|| bad(format!("malformed parameter line: {line:?}")))?;
            if params.insert(name.to_string(), entry).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
        } else {
            return Err(bad(format!("unknown manifest key {key:?}")));
        }
    }
    Ok((config, params))
}

fn config_from_manifest(config: &HashMap<String, String>) -> Result<ModelConfig> {
    let get = |key: &str| {
        config
            .get(key)
            .ok_or_else(|| bad(format!("manifest missing model.{key}")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| bad(format!("model.{key} is not a count: {:?}", config[key])))
    };
    let mode = Mode::parse(get("mode")?)
        .ok_or_else(|| bad(format!("unknown mode {:?}", config["mode"])))?;
    let mask_strategy = MaskStrategy::parse(get("mask_strategy")?)
        .ok_or_else(|| bad(format!("unknown mask strategy {:?}", config["mask_strategy"])))?;
    let positions = match get("positions")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(bad(format!("model.positions must be true/false, got {other:?}"))),
    };
    let parsed = ModelConfig {
        mode,
        m: num("m")?,
        d: num("d")?,
        heads: num("heads")?,
        aqn_layers: num("aqn_layers")?,
        mlm_layers: num("mlm_layers")?,
        ffn_hidden: num("ffn_hidden")?,
        image_size: num("image_size")?,
        positions,
        mask_strategy,
    };
    let known = [
        "mode", "m", "d", "heads", "aqn_layers", "mlm_layers", "ffn_hidden", "image_size",
        "positions", "mask_strategy",
    ];
    for key in config.keys() {
        if !known.contains(&key.as_str()) {
            return Err(bad(format!("unknown manifest key model.{key}")));
        }
    }
    Ok(parsed)
}

/// Rebuilds the model described by the manifest and overwrites its freshly
/// initialized parameters with the stored tensors. Any disagreement between
/// manifest, files and the rebuilt model is an `IncompatibleCheckpoint`.
pub fn load(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (config, mut entries) = parse_manifest(&text)?;
    let config = config_from_manifest(&config)?;
    let model = Model::new(config, 0)?;
    for (name, tensor, scheme) in model.params.iter() {
        let entry = entries
            .remove(name)
            .ok_or_else(|| bad(format!("checkpoint lacks parameter {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(bad(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        if entry.scheme != scheme {
            return Err(bad(format!(
                "parameter {name}: checkpoint scheme {} vs model scheme {scheme}",
                entry.scheme
            )));
        }
        let stored = read_tensor(dir.join(&entry.file))?;
        if stored.shape() != tensor.shape() {
            return Err(bad(format!(
                "parameter {name}: file {} holds shape {:?}, manifest says {:?}",
                entry.file,
                stored.shape(),
                entry.shape
            )));
        }
        tensor.set_data(&stored.to_vec())?;
    }
    if let Some(name) = entries.keys().next() {
        return Err(bad(format!("checkpoint has extra parameter {name}")));
    }
    Ok(model)
}
