//! Every command leaves a `run.json` in its output directory: the command
//! name, the fully resolved config and content digests of the inputs. The
//! `rerun` subcommand replays such a record.

use std::collections::BTreeMap;
use std::path::Path;

use label2label::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
}

pub fn write(out_dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("run.json");
    let mut text = serde_json::to_string_pretty(record).expect("record serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ManifestError {
        detail: format!("{}: {e}", path.display()),
    })
}
