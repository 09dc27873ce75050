use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamSet};
use crate::tensor::{Tape, Tensor};

pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> FeedForward {
        FeedForward {
            lin1: Linear::new(ps, &format!("{prefix}.lin1"), d, hidden, rng),
            lin2: Linear::new(ps, &format!("{prefix}.lin2"), hidden, d, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.lin1.forward(tape, x)?;
        self.lin2.forward(tape, &tape.gelu(&h))
    }
}

/// Attention matrices captured from one layer pass, per head.
pub struct LayerAttention {
    pub self_attn: Vec<Tensor>,
    pub cross_attn: Option<Vec<Tensor>>,
}

/// One decoder block: self-attention, optional cross-attention into a
/// visual memory, then feed-forward; residual + post-norm around each
/// sublayer. `cross_attn: None` yields a plain encoder block for the
/// image-free ablation.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: Option<(MultiHeadAttention, LayerNorm)>,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        with_cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> DecoderLayer {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{prefix}.self_attn"), d, heads, rng),
            norm1: LayerNorm::new(ps, &format!("{prefix}.norm1"), d, rng),
            cross_attn: with_cross.then(|| {
                (
                    MultiHeadAttention::new(ps, &format!("{prefix}.cross_attn"), d, heads, rng),
                    LayerNorm::new(ps, &format!("{prefix}.norm2"), d, rng),
                )
            }),
            ffn: FeedForward::new(ps, &format!("{prefix}.ffn"), d, ffn_hidden, rng),
            norm3: LayerNorm::new(ps, &format!("{prefix}.norm3"), d, rng),
        }
    }

    /// `memory` is `(keys, values)`; keys normally carry positional
    /// embeddings while values do not.
    pub fn forward(
        &self,
        tape: &Tape,
        tokens: &Tensor,
        memory: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, LayerAttention)> {
        let (sa_out, sa_attn) = self.self_attn.forward(tape, tokens, tokens, tokens)?;
        let mut x = self.norm1.forward(tape, &tape.add(tokens, &sa_out)?)?;

        let mut cross = None;
        if let Some((ca, norm2)) = &self.cross_attn {
            let (keys, values) = memory.expect("cross-attention layer needs a memory");
            let (ca_out, ca_attn) = ca.forward(tape, &x, keys, values)?;
            x = norm2.forward(tape, &tape.add(&x, &ca_out)?)?;
            cross = Some(ca_attn);
        }

        let ffn_out = self.ffn.forward(tape, &x)?;
        let out = self.norm3.forward(tape, &tape.add(&x, &ffn_out)?)?;
        Ok((
            out,
            LayerAttention {
                self_attn: sa_attn,
                cross_attn: cross,
            },
        ))
    }
}
