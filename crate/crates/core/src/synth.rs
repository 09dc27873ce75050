//! Synthetic correlated-attribute benchmark. Labels are noisy copies of a
//! few latent binary factors, each attribute renders a striped patch of the
//! image, and random patches are occluded to exact zeros, so some attributes
//! can only be inferred from their siblings. An exact Bayes posterior over
//! the latent factors doubles as the benchmark's ground-truth optimum.
//!
//! On disk a dataset is a directory of `sample_{id}.l2lt` image tensors, a
//! `labels.csv`, and a `manifest.json` that echoes the generator settings so
//! the oracle can be reconstructed at evaluation time.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::normal_draw;
use crate::rng::{streams, substream};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Enumeration over latent configurations is 2^K; beyond this we refuse.
pub const ORACLE_MAX_FACTORS: usize = 16;

/// Additive pixel noise on rendered (visible) patches.
pub const RENDER_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    /// Attribute count M.
    pub m: usize,
    /// Latent factor count K.
    pub k: usize,
    /// attr_map[j] names the factor that attribute j copies.
    pub attr_map: Vec<usize>,
    /// Probability that an attribute flips away from its factor.
    pub flip_eps: f64,
    /// Probability that an attribute's patch is zeroed.
    pub occlusion_rho: f64,
    /// Square image side length.
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Factors assigned to contiguous runs of attributes, as even as M/K
    /// allows; the benchmark specs in tests and docs use this layout.
    pub fn contiguous_map(m: usize, k: usize) -> Vec<usize> {
        (0..m).map(|j| (j * k) / m).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::ConfigError { detail });
        if self.m == 0 || self.k == 0 {
            return fail(format!("m={} k={} must be positive", self.m, self.k));
        }
        if self.k > self.m {
            return fail(format!("k={} exceeds m={}", self.k, self.m));
        }
        if self.attr_map.len() != self.m {
            return fail(format!("attr_map length {} vs m={}", self.attr_map.len(), self.m));
        }
        if let Some(&bad) = self.attr_map.iter().find(|&&f| f >= self.k) {
            return fail(format!("attr_map entry {bad} out of range for k={}", self.k));
        }
        if !(0.0..1.0).contains(&self.flip_eps) || !(0.0..1.0).contains(&self.occlusion_rho) {
            return fail(format!(
                "flip_eps={} occlusion_rho={} must lie in [0,1)",
                self.flip_eps, self.occlusion_rho
            ));
        }
        let (pr, pc) = patch_grid(self.m);
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::BadImageShape {
                detail: format!("image_size {} must be a positive multiple of 4", self.image_size),
            });
        }
        if self.image_size % pr != 0 || self.image_size % pc != 0 {
            return Err(Error::BadImageShape {
                detail: format!("image_size {} does not tile into a {pr}x{pc} patch grid", self.image_size),
            });
        }
        Ok(())
    }
}

/// One drawn sample. `latent` and `occluded` exist for oracle evaluation
/// only; occlusion is recoverable from the image anyway (zeroed patches).
pub struct SynthSample {
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub latent: Vec<u8>,
    pub occluded: Vec<bool>,
}

/// Patch grid (rows, cols) with rows·cols = M and rows ≤ cols.
pub fn patch_grid(m: usize) -> (usize, usize) {
    let mut best = (1, m);
    let mut r = 1;
    while r * r <= m {
        if m % r == 0 {
            best = (r, m / r);
        }
        r += 1;
    }
    best
}

/// Pixel rectangle (row0, col0, height, width) owned by attribute j.
pub fn patch_rect(spec: &SynthSpec, j: usize) -> (usize, usize, usize, usize) {
    let (pr, pc) = patch_grid(spec.m);
    let (ph, pw) = (spec.image_size / pr, spec.image_size / pc);
    let (gr, gc) = (j / pc, j % pc);
    (gr * ph, gc * pw, ph, pw)
}

/// Noiseless stripe value at patch-local (r, c): value 1 draws diagonal
/// bands, value 0 anti-diagonal ones.
pub(crate) fn base_pixel(value: u8, r: usize, c: usize) -> f64 {
    let on = if value == 1 {
        (r as i64 - c as i64).rem_euclid(4) < 2
    } else {
        (r + c) % 4 < 2
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Draw sample `id` of a spec. All of a sample's randomness comes from one
/// dedicated substream, in a fixed order (factors, flips, occlusion, then
/// pixel noise patch by patch), so any sample can be re-drawn in isolation.
pub fn draw_sample(spec: &SynthSpec, id: u64) -> SynthSample {
    let mut rng = substream(spec.seed, streams::DATA + id);
    let latent: Vec<u8> = (0..spec.k).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
    let labels: Vec<u8> = (0..spec.m)
        .map(|j| {
            let flip = u8::from(rng.gen::<f64>() < spec.flip_eps);
            latent[spec.attr_map[j]] ^ flip
        })
        .collect();
    let occluded: Vec<bool> = (0..spec.m).map(|_| rng.gen::<f64>() < spec.occlusion_rho).collect();
    let s = spec.image_size;
    let mut pixels = vec![0.0; s * s];
    for j in 0..spec.m {
        if occluded[j] {
            continue;
        }
        let (r0, c0, ph, pw) = patch_rect(spec, j);
        for r in 0..ph {
            for c in 0..pw {
                pixels[(r0 + r) * s + c0 + c] =
                    base_pixel(labels[j], r, c) + RENDER_NOISE_SIGMA * normal_draw(&mut rng);
            }
        }
    }
    let image = Tensor::from_vec(vec![s, s, 1], pixels).expect("image buffer sized to shape");
    SynthSample {
        image,
        labels,
        latent,
        occluded,
    }
}

/// Recover per-patch visibility from an image: occluded patches are exactly
/// zero, rendered ones carry noise.
pub fn occlusion_from_image(image: &Tensor, spec: &SynthSpec) -> Result<Vec<bool>> {
    let s = spec.image_size;
    if image.shape() != [s, s, 1] {
        return Err(Error::BadImageShape {
            detail: format!("image {:?} vs spec {s}x{s}x1", image.shape()),
        });
    }
    let data = image.data();
    Ok((0..spec.m)
        .map(|j| {
            let (r0, c0, ph, pw) = patch_rect(spec, j);
            (0..ph).all(|r| (0..pw).all(|c| data[(r0 + r) * s + c0 + c] == 0.0))
        })
        .collect())
}

/// Exact posterior P(y_j = 1 | visible patches) by enumerating latent
/// configurations. Visible attributes are read off directly; occluded ones
/// average the flip-corrected factor posterior.
pub fn bayes_oracle(labels: &[u8], occluded: &[bool], spec: &SynthSpec) -> Result<Vec<f64>> {
    if spec.k > ORACLE_MAX_FACTORS {
        return Err(Error::KTooLarge {
            k: spec.k,
            cap: ORACLE_MAX_FACTORS,
        });
    }
    if labels.len() != spec.m || occluded.len() != spec.m {
        return Err(Error::ShapeMismatch {
            op: "bayes_oracle",
            detail: format!("{} labels, {} occlusion flags, m={}", labels.len(), occluded.len(), spec.m),
        });
    }
    let eps = spec.flip_eps;
    let configs = 1usize << spec.k;
    let mut weight = vec![1.0f64; configs];
    for z in 0..configs {
        for j in 0..spec.m {
            if occluded[j] {
                continue;
            }
            let zj = (z >> spec.attr_map[j]) & 1;
            weight[z] *= if usize::from(labels[j]) == zj { 1.0 - eps } else { eps };
        }
    }
    let total: f64 = weight.iter().sum();
    if total <= 0.0 {
        return Err(Error::DomainError {
            op: "bayes_oracle",
            detail: "visible labels impossible under the spec".into(),
        });
    }
    Ok((0..spec.m)
        .map(|j| {
            if !occluded[j] {
                return f64::from(labels[j]);
            }
            let mut q = 0.0;
            for z in 0..configs {
                let zj = (z >> spec.attr_map[j]) & 1;
                q += weight[z] / total * if zj == 1 { 1.0 - eps } else { eps };
            }
            q
        })
        .collect())
}

/// Per-attribute majority vote over a label matrix; ties vote 1.
pub fn majority_baseline(labels: &[Vec<u8>]) -> Vec<u8> {
    if labels.is_empty() {
        return Vec::new();
    }
    let m = labels[0].len();
    (0..m)
        .map(|j| {
            let ones = labels.iter().filter(|row| row[j] == 1).count();
            u8::from(2 * ones >= labels.len())
        })
        .collect()
}

/// Mean error restricted to (sample, attribute) pairs whose patch was
/// occluded. None when nothing was occluded.
pub fn occluded_error(preds: &[Vec<u8>], labels: &[Vec<u8>], occluded: &[Vec<bool>]) -> Option<f64> {
    let mut wrong = 0u64;
    let mut total = 0u64;
    for ((p, y), o) in preds.iter().zip(labels).zip(occluded) {
        for j in 0..y.len() {
            if o[j] {
                total += 1;
                wrong += u64::from(p[j] != y[j]);
            }
        }
    }
    (total > 0).then(|| wrong as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub attributes: Vec<String>,
    pub samples: u64,
    pub labels_file: String,
    /// File name template; `{id}` is replaced with the sample id.
    pub image_pattern: String,
    pub splits: SplitIds,
    pub spec: Option<SynthSpec>,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// The default 80/10/10 carve of a total count; remainders go to train.
    pub fn standard(n: usize) -> SplitSizes {
        let val = n / 10;
        let test = n / 10;
        SplitSizes {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Write a full dataset under `out_dir`. Sample ids are dealt to splits by a
/// seeded shuffle; files are written in id order so reruns are byte-identical.
pub fn generate(spec: &SynthSpec, sizes: &SplitSizes, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let n = sizes.total();
    if n == 0 {
        return Err(Error::ConfigError {
            detail: "dataset needs at least one sample".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut ids: Vec<u64> = (0..n as u64).collect();
    let mut rng = substream(spec.seed, streams::INIT);
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let splits = SplitIds {
        train: ids[..sizes.train].to_vec(),
        val: ids[sizes.train..sizes.train + sizes.val].to_vec(),
        test: ids[sizes.train + sizes.val..].to_vec(),
    };

    let mut csv = String::from("sample_id");
    for j in 0..spec.m {
        let _ = write!(csv, ",attr_{j}");
    }
    csv.push('\n');
    for id in 0..n as u64 {
        let sample = draw_sample(spec, id);
        let _ = write!(csv, "{id}");
        for &v in &sample.labels {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
        write_tensor(out_dir.join(format!("sample_{id}.l2lt")), &sample.image)?;
    }
    let labels_path = out_dir.join("labels.csv");
    std::fs::write(&labels_path, csv).map_err(|e| Error::io(&labels_path, e))?;

    let manifest = DatasetManifest {
        attributes: (0..spec.m).map(|j| format!("attr_{j}")).collect(),
        samples: n as u64,
        labels_file: "labels.csv".into(),
        image_pattern: "sample_{id}.l2lt".into(),
        splits,
        spec: Some(spec.clone()),
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading. Labels live in memory; images are
/// read on demand.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    labels: HashMap<u64, Vec<u8>>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let raw = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&raw).map_err(|e| Error::ManifestError {
            detail: format!("{}: {e}", manifest_path.display()),
        })?;
        if let Some(spec) = &manifest.spec {
            spec.validate()?;
            if spec.m != manifest.attributes.len() {
                return Err(Error::ManifestError {
                    detail: format!("{} attributes vs spec m={}", manifest.attributes.len(), spec.m),
                });
            }
        }
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let labels = parse_labels_csv(&dir.join(&manifest.labels_file), manifest.attributes.len())?;
        if labels.len() as u64 != manifest.samples {
            return Err(Error::ManifestError {
                detail: format!("{} label rows vs {} samples in manifest", labels.len(), manifest.samples),
            });
        }
        for id in manifest
            .splits
            .train
            .iter()
            .chain(&manifest.splits.val)
            .chain(&manifest.splits.test)
        {
            if !labels.contains_key(id) {
                return Err(Error::ManifestError {
                    detail: format!("split references sample {id} with no label row"),
                });
            }
        }
        Ok(Dataset { dir, manifest, labels })
    }

    pub fn label(&self, id: u64) -> Result<&[u8]> {
        self.labels
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(Error::SampleNotFound { id })
    }

    pub fn image_path(&self, id: u64) -> PathBuf {
        self.dir.join(self.manifest.image_pattern.replace("{id}", &id.to_string()))
    }

    pub fn load_image(&self, id: u64) -> Result<Tensor> {
        if !self.labels.contains_key(&id) {
            return Err(Error::SampleNotFound { id });
        }
        read_tensor(self.image_path(id))
    }

    pub fn split(&self, name: &str) -> Result<&[u64]> {
        match name {
            "train" => Ok(&self.manifest.splits.train),
            "val" => Ok(&self.manifest.splits.val),
            "test" => Ok(&self.manifest.splits.test),
            other => Err(Error::ConfigError {
                detail: format!("unknown split {other:?} (expected train, val, or test)"),
            }),
        }
    }

    /// Label matrix for a split, in the split's stored id order.
    pub fn split_labels(&self, name: &str) -> Result<Vec<Vec<u8>>> {
        self.split(name)?
            .iter()
            .map(|&id| self.label(id).map(<[u8]>::to_vec))
            .collect()
    }
}

fn parse_labels_csv(path: &Path, m: usize) -> Result<HashMap<u64, Vec<u8>>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines();
    let mut expected = String::from("sample_id");
    for j in 0..m {
        let _ = write!(expected, ",attr_{j}");
    }
    match lines.next() {
        Some(h) if h == expected => {}
        other => {
            return Err(Error::ManifestError {
                detail: format!("{}: bad header {other:?}", path.display()),
            })
        }
    }
    let mut out = HashMap::new();
    for (line_no, line) in lines.enumerate() {
        let row = line_no + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m + 1 {
            return Err(Error::ManifestError {
                detail: format!("{} row {row}: {} fields, expected {}", path.display(), fields.len(), m + 1),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::ManifestError {
            detail: format!("{} row {row}: bad sample id {:?}", path.display(), fields[0]),
        })?;
        let mut values = Vec::with_capacity(m);
        for (column, field) in fields[1..].iter().enumerate() {
            match *field {
                "0" => values.push(0),
                "1" => values.push(1),
                other => {
                    return Err(Error::LabelDomainError {
                        row,
                        column,
                        detail: format!("value {other:?} is not 0 or 1"),
                    })
                }
            }
        }
        if out.insert(id, values).is_some() {
            return Err(Error::ManifestError {
                detail: format!("{} row {row}: duplicate sample id {id}", path.display()),
            });
        }
    }
    Ok(out)
}
