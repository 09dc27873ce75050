//! SHA-256 content digests of a run's inputs, recorded in run.json so a
//! later rerun can prove it read the same bytes.

use std::path::Path;

use label2label::checkpoint::MANIFEST_FILE;
use label2label::synth::DatasetManifest;
use label2label::{Error, Result};
use sha2::{Digest, Sha256};

fn add_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    hasher.update(&bytes);
    Ok(())
}

fn hex(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest over the manifest, the label table and every image file in id
/// order.
pub fn dataset_digest(dir: &Path, manifest: &DatasetManifest) -> Result<String> {
    let mut hasher = Sha256::new();
    add_file(&mut hasher, &dir.join("manifest.json"))?;
    add_file(&mut hasher, &dir.join(&manifest.labels_file))?;
    for id in 0..manifest.samples {
        let name = manifest.image_pattern.replace("{id}", &id.to_string());
        add_file(&mut hasher, &dir.join(name))?;
    }
    Ok(hex(hasher))
}

/// Digest over the checkpoint manifest and every parameter file it names,
/// in manifest order.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("param.") {
            if let Some(file) = rest.split_once('=').and_then(|(_, v)| v.split(';').next()) {
                add_file(&mut hasher, &dir.join(file))?;
            }
        }
    }
    Ok(hex(hasher))
}
