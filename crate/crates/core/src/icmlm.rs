//! Masked-sentence refinement network. The pseudo sentence from the query
//! network is masked word-by-word, embedded through a small per-attribute
//! vocabulary, run through decoder layers that may attend into the image,
//! and classified again at every position. Word order never enters: there
//! are no positional embeddings on this side.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{DecoderLayer, InitScheme, LayerAttention, ParamSet};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// One MASK row per attribute (vocabulary rows 2M..3M-1).
    AttributeSpecific,
    /// A single shared MASK row (row 2M).
    AttributeAgnostic,
    /// No stored row; masked positions embed as the zero vector.
    ZeroVector,
}

impl MaskStrategy {
    pub fn mask_rows(&self, m: usize) -> usize {
        match self {
            MaskStrategy::AttributeSpecific => m,
            MaskStrategy::AttributeAgnostic => 1,
            MaskStrategy::ZeroVector => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskStrategy::AttributeSpecific => "attribute_specific",
            MaskStrategy::AttributeAgnostic => "attribute_agnostic",
            MaskStrategy::ZeroVector => "zero_vector",
        }
    }

    pub fn parse(s: &str) -> Option<MaskStrategy> {
        match s {
            "attribute_specific" => Some(MaskStrategy::AttributeSpecific),
            "attribute_agnostic" => Some(MaskStrategy::AttributeAgnostic),
            "zero_vector" => Some(MaskStrategy::ZeroVector),
            _ => None,
        }
    }
}

/// Token table: row 2j encodes attribute j = 0, row 2j+1 encodes
/// attribute j = 1, mask rows (if any) follow.
pub struct WordVocab {
    pub table: Tensor,
    pub strategy: MaskStrategy,
    pub m: usize,
}

impl WordVocab {
    pub fn new(ps: &mut ParamSet, prefix: &str, m: usize, d: usize, strategy: MaskStrategy, rng: &mut ChaCha8Rng) -> WordVocab {
        let rows = 2 * m + strategy.mask_rows(m);
        WordVocab {
            table: ps.register(&format!("{prefix}.words"), vec![rows, d], InitScheme::Normal(0.02), rng),
            strategy,
            m,
        }
    }
}

pub const MASK_WORD: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSentence {
    /// Per position: 0, 1, or MASK_WORD.
    pub words: Vec<u8>,
    pub mask_positions: Vec<usize>,
}

impl MaskedSentence {
    pub fn unmasked(s: &[u8]) -> MaskedSentence {
        MaskedSentence {
            words: s.to_vec(),
            mask_positions: Vec::new(),
        }
    }
}

/// Per-position mask decisions: one rng draw per position, in position
/// order. Decisions depend only on the rng stream, never on word values, so
/// they can be drawn ahead of the forward pass.
pub fn draw_mask_flags(m: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..m).map(|_| rng.gen::<f64>() < alpha).collect()
}

/// Apply precomputed mask decisions to a sentence.
pub fn apply_mask(s: &[u8], flags: &[bool]) -> MaskedSentence {
    assert_eq!(s.len(), flags.len(), "one mask flag per word");
    let mut words = s.to_vec();
    let mut mask_positions = Vec::new();
    for (j, w) in words.iter_mut().enumerate() {
        if flags[j] {
            *w = MASK_WORD;
            mask_positions.push(j);
        }
    }
    MaskedSentence { words, mask_positions }
}

/// Independently mask each word with probability `alpha`.
pub fn mask_sentence(s: &[u8], alpha: f64, rng: &mut ChaCha8Rng) -> MaskedSentence {
    apply_mask(s, &draw_mask_flags(s.len(), alpha, rng))
}

/// Look each word up in the vocabulary. Masked positions resolve per the
/// strategy; the zero-vector strategy multiplies the gathered rows with a
/// constant 0/1 row gate so masked rows come out exactly zero and push no
/// gradient anywhere.
pub fn embed_words(tape: &Tape, ms: &MaskedSentence, vocab: &WordVocab) -> Result<Tensor> {
    let m = vocab.m;
    if ms.words.len() != m {
        return Err(Error::StrategyMismatch {
            detail: format!("sentence length {} vs vocabulary for {m} attributes", ms.words.len()),
        });
    }
    let expected_rows = 2 * m + vocab.strategy.mask_rows(m);
    if vocab.table.shape()[0] != expected_rows {
        return Err(Error::StrategyMismatch {
            detail: format!(
                "{} vocabulary rows but strategy {} needs {expected_rows}",
                vocab.table.shape()[0],
                vocab.strategy.name()
            ),
        });
    }
    let mut ids = Vec::with_capacity(m);
    let mut zero_gate: Option<Vec<f64>> = None;
    let d = vocab.table.shape()[1];
    for (j, &w) in ms.words.iter().enumerate() {
        let id = match (w, vocab.strategy) {
            (0 | 1, _) => 2 * j + w as usize,
            (MASK_WORD, MaskStrategy::AttributeSpecific) => 2 * m + j,
            (MASK_WORD, MaskStrategy::AttributeAgnostic) => 2 * m,
            (MASK_WORD, MaskStrategy::ZeroVector) => {
                zero_gate.get_or_insert_with(|| vec![1.0; m * d])[j * d..(j + 1) * d].fill(0.0);
                0
            }
            _ => {
                return Err(Error::StrategyMismatch {
                    detail: format!("word value {w} at position {j} outside {{0, 1, MASK}}"),
                })
            }
        };
        ids.push(id);
    }
    let rows = tape.gather_rows(&vocab.table, &ids)?;
    match zero_gate {
        Some(gate) => tape.mul(&rows, &Tensor::from_vec(vec![m, d], gate)?),
        None => Ok(rows),
    }
}

pub struct Icmlm {
    pub vocab: WordVocab,
    pub layers: Vec<DecoderLayer>,
    /// `[d, M]`: column j is attribute j's classifier (separate from the
    /// query network's).
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub no_image: bool,
    pub m: usize,
    pub d: usize,
}

pub struct IcmlmOutput {
    pub token_responses: Tensor,
    /// Final probabilities p, length M: every position predicted, masked
    /// or not.
    pub probs: Tensor,
    pub attention: Vec<LayerAttention>,
}

impl Icmlm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        m: usize,
        d: usize,
        layers: usize,
        heads: usize,
        ffn_hidden: usize,
        strategy: MaskStrategy,
        no_image: bool,
        rng: &mut ChaCha8Rng,
    ) -> Icmlm {
        assert!(layers >= 1, "refinement stack needs at least one layer");
        let vocab = WordVocab::new(ps, &format!("{prefix}.vocab"), m, d, strategy, rng);
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(ps, &format!("{prefix}.layer{i}"), d, heads, ffn_hidden, !no_image, rng))
            .collect();
        Icmlm {
            vocab,
            layers,
            classifier_w: ps.register(&format!("{prefix}.cls.w"), vec![d, m], InitScheme::UniformFanin, rng),
            classifier_b: ps.register(&format!("{prefix}.cls.b"), vec![m], InitScheme::Zeros, rng),
            no_image,
            m,
            d,
        }
    }

    pub fn forward(&self, tape: &Tape, embeds: &Tensor, features: Option<&FeatureMap>) -> Result<IcmlmOutput> {
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut x = embeds.clone();
        for layer in &self.layers {
            let memory = if self.no_image {
                None
            } else {
                let fm = features.expect("image-conditioned forward needs features");
                Some((&fm.keys, &fm.values))
            };
            let (next, attn) = layer.forward(tape, &x, memory)?;
            attention.push(attn);
            x = next;
        }
        let wt = tape.transpose2d(&self.classifier_w)?;
        let prod = tape.mul(&x, &wt)?;
        let logits = tape.sum_axis(&prod, 1)?;
        let logits = tape.add(&logits, &self.classifier_b)?;
        let probs = tape.sigmoid(&logits);
        Ok(IcmlmOutput {
            token_responses: x,
            probs,
            attention,
        })
    }

    /// Inference path: no masking, no rng; the pseudo sentence goes straight
    /// in and p comes out.
    pub fn infer(&self, tape: &Tape, pseudo_sentence: &[u8], features: Option<&FeatureMap>) -> Result<IcmlmOutput> {
        let ms = MaskedSentence::unmasked(pseudo_sentence);
        let embeds = embed_words(tape, &ms, &self.vocab)?;
        self.forward(tape, &embeds, features)
    }
}
