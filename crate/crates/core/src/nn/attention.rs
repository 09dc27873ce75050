use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamSet};
use crate::tensor::{Tape, Tensor};

/// Multi-head attention over row-major token matrices. Keys and values are
/// separate arguments because the visual memory path feeds
/// position-augmented keys but raw values.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, prefix: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> MultiHeadAttention {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(ps, &format!("{prefix}.wq"), d, d, rng),
            wk: Linear::new(ps, &format!("{prefix}.wk"), d, d, rng),
            wv: Linear::new(ps, &format!("{prefix}.wv"), d, d, rng),
            wo: Linear::new(ps, &format!("{prefix}.wo"), d, d, rng),
            heads,
            d_head: d / heads,
        }
    }

    /// Returns the attended output `[n_q, d]` and the post-softmax attention
    /// matrix `[n_q, n_k]` of every head, in head order.
    pub fn forward(
        &self,
        tape: &Tape,
        queries: &Tensor,
        keys: &Tensor,
        values: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if keys.shape()[0] == 0 {
            return Err(Error::ZeroLengthSequence);
        }
        if keys.shape() != values.shape() || queries.shape()[1] != keys.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "multihead_attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}",
                    queries.shape(),
                    keys.shape(),
                    values.shape()
                ),
            });
        }
        let q = self.wq.forward(tape, queries)?;
        let k = self.wk.forward(tape, keys)?;
        let v = self.wv.forward(tape, values)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();

        let mut ctxs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.d_head;
            let qh = tape.slice_cols(&q, start, self.d_head)?;
            let kh = tape.slice_cols(&k, start, self.d_head)?;
            let vh = tape.slice_cols(&v, start, self.d_head)?;
            let scores = tape.matmul(&qh, &tape.transpose2d(&kh)?)?;
            let attn = tape.softmax_lastdim(&tape.mul_scalar(&scores, scale));
            ctxs.push(tape.matmul(&attn, &vh)?);
            attns.push(attn);
        }
        let merged = tape.concat_cols(&ctxs)?;
        Ok((self.wo.forward(tape, &merged)?, attns))
    }
}
