//! Attribute query network: M learned query vectors attend over the image
//! grid through decoder layers, and M independent sigmoid classifiers read
//! the refined queries out into per-attribute probabilities plus a binary
//! pseudo sentence. With zero layers it degenerates into the pooled-feature
//! linear baseline.

use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::error::Result;
use crate::nn::{DecoderLayer, InitScheme, LayerAttention, ParamSet};
use crate::tensor::{Tape, Tensor};

pub struct Aqn {
    pub queries: Tensor,
    pub layers: Vec<DecoderLayer>,
    /// `[d, M]`: column j is attribute j's classifier.
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub m: usize,
    pub d: usize,
}

pub struct AqnOutput {
    /// Refined query features, one row per attribute.
    pub responses: Tensor,
    /// Sigmoid probabilities l, length M.
    pub probs: Tensor,
    /// s_j = 1 iff l_j > 0.5; plain data, no gradient path.
    pub pseudo_sentence: Vec<u8>,
    pub attention: Vec<LayerAttention>,
}

/// Strict threshold at 0.5; exactly 0.5 maps to 0. Intentionally not a tape
/// op: nothing differentiates through the pseudo sentence.
pub fn readout(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > 0.5)).collect()
}

impl Aqn {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        m: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Aqn {
        let queries = ps.register(&format!("{prefix}.queries"), vec![m, d], InitScheme::Normal(0.02), rng);
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(ps, &format!("{prefix}.layer{i}"), d, heads, ffn_hidden, true, rng))
            .collect();
        Aqn {
            queries,
            layers,
            classifier_w: ps.register(&format!("{prefix}.cls.w"), vec![d, m], InitScheme::UniformFanin, rng),
            classifier_b: ps.register(&format!("{prefix}.cls.b"), vec![m], InitScheme::Zeros, rng),
            m,
            d,
        }
    }

    /// Per-attribute logits: row j of `responses` dotted with classifier
    /// column j, plus bias.
    fn classify(&self, tape: &Tape, responses: &Tensor) -> Result<Tensor> {
        let wt = tape.transpose2d(&self.classifier_w)?;
        let prod = tape.mul(responses, &wt)?;
        let logits = tape.sum_axis(&prod, 1)?;
        let logits = tape.add(&logits, &self.classifier_b)?;
        Ok(tape.sigmoid(&logits))
    }

    pub fn forward(&self, tape: &Tape, features: &FeatureMap) -> Result<AqnOutput> {
        let mut attention = Vec::with_capacity(self.layers.len());
        let responses = if self.layers.is_empty() {
            // pooled-mean baseline: every attribute reads the same global row
            let pooled = tape.mean_axis(&features.values, 0)?;
            let pooled = tape.reshape(&pooled, vec![1, self.d])?;
            let ones = Tensor::full(vec![self.m, 1], 1.0);
            tape.matmul(&ones, &pooled)?
        } else {
            let mut x = self.queries.clone();
            for layer in &self.layers {
                let (next, attn) = layer.forward(tape, &x, Some((&features.keys, &features.values)))?;
                attention.push(attn);
                x = next;
            }
            x
        };
        let probs = self.classify(tape, &responses)?;
        let pseudo_sentence = readout(&probs.data());
        Ok(AqnOutput {
            responses,
            probs,
            pseudo_sentence,
            attention,
        })
    }
}
