//! Building blocks: linear layers, layer norm, multi-head attention,
//! decoder layers, parameter registry, SGD and schedulers.

mod attention;
mod decoder;
mod optim;

pub use attention::MultiHeadAttention;
pub use decoder::{DecoderLayer, FeedForward, LayerAttention};
pub use optim::{LrSchedule, Sgd};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the first dim.
    UniformFanin,
    Normal(f64),
    Zeros,
    Ones,
}

impl InitScheme {
    pub fn name(&self) -> String {
        match self {
            InitScheme::UniformFanin => "uniform_fanin".into(),
            InitScheme::Normal(s) => format!("normal_{s}"),
            InitScheme::Zeros => "zeros".into(),
            InitScheme::Ones => "ones".into(),
        }
    }
}

/// Box-Muller, two uniforms per pair of normals; consumption order fixed.
pub fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn init_params(shape: Vec<usize>, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match scheme {
        InitScheme::UniformFanin => {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        InitScheme::Normal(sigma) => (0..n).map(|_| sigma * normal_draw(rng)).collect(),
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Ones => vec![1.0; n],
    };
    Tensor::param(shape, data).expect("init shape/data consistent")
}

/// Ordered registry of named parameters. Iteration order is registration
/// order everywhere (optimizer, snapshots, checkpoints), which is what makes
/// training runs reproducible.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor, String)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Tensor {
        assert!(
            self.entries.iter().all(|(n, _, _)| n != name),
            "duplicate parameter name {name}"
        );
        let t = init_params(shape, scheme, rng);
        self.entries.push((name.to_string(), t.clone(), scheme.name()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &str)> {
        self.entries.iter().map(|(n, t, s)| (n.as_str(), t, s.as_str()))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t, _)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t, _) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|(_, t, _)| t.to_vec()).collect()
    }

    pub fn load_snapshot(&self, snap: &[Vec<f64>]) -> Result<()> {
        if snap.len() != self.entries.len() {
            return Err(Error::ShapeMismatch {
                op: "load_snapshot",
                detail: format!("{} tensors vs {} entries", snap.len(), self.entries.len()),
            });
        }
        for ((name, t, _), data) in self.entries.iter().zip(snap) {
            if data.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "load_snapshot",
                    detail: format!("param {name}: {} values vs {} slots", data.len(), t.numel()),
                });
            }
            t.set_data(data)?;
        }
        Ok(())
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            w: ps.register(&format!("{prefix}.w"), vec![d_in, d_out], InitScheme::UniformFanin, rng),
            b: ps.register(&format!("{prefix}.b"), vec![d_out], InitScheme::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(x, &self.w)?;
        tape.add_rows(&h, &self.b)
    }
}

pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> LayerNorm {
        LayerNorm {
            gain: ps.register(&format!("{prefix}.gain"), vec![d], InitScheme::Ones, rng),
            bias: ps.register(&format!("{prefix}.bias"), vec![d], InitScheme::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let g = tape.mul_rows(&n, &self.gain)?;
        tape.add_rows(&g, &self.bias)
    }
}
