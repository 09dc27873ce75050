//! Full pipelines for the five training modes. Every mode shares the conv
//! backbone; the query network and the masked-sentence refiner are attached
//! per mode. The thresholded pseudo sentence crosses between the two
//! networks as plain words, so gradients couple them only through shared
//! image features and the summed objective.

use crate::aqn::{readout, Aqn, AqnOutput};
use crate::backbone::{Backbone, FeatureMap};
use crate::error::{Error, Result};
use crate::icmlm::{apply_mask, embed_words, Icmlm, IcmlmOutput, MaskStrategy, MaskedSentence};
use crate::loss::{bce_loss, WeightScheme};
use crate::nn::{Linear, ParamSet};
use crate::rng::{streams, substream};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Backbone, mean pool, one linear layer. The plainest baseline.
    FcHead,
    /// Backbone plus query network; its probabilities are the prediction.
    AqnOnly,
    /// Full pipeline: query network feeds the image-conditioned refiner,
    /// whose probabilities are the prediction. Jointly trained.
    Label2label,
    /// Full pipeline but the refiner never sees the image.
    MlmNoImage,
    /// Same architecture as `Label2label`, trained in two stages: queries
    /// first, then the refiner with everything else frozen.
    TwoStage,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::FcHead => "fc_head",
            Mode::AqnOnly => "aqn_only",
            Mode::Label2label => "label2label",
            Mode::MlmNoImage => "mlm_no_image",
            Mode::TwoStage => "two_stage",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "fc_head" => Some(Mode::FcHead),
            "aqn_only" => Some(Mode::AqnOnly),
            "label2label" => Some(Mode::Label2label),
            "mlm_no_image" => Some(Mode::MlmNoImage),
            "two_stage" => Some(Mode::TwoStage),
            _ => None,
        }
    }

    pub fn has_refiner(&self) -> bool {
        matches!(self, Mode::Label2label | Mode::MlmNoImage | Mode::TwoStage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    /// Query-network decoder depth.
    pub aqn_layers: usize,
    /// Refiner decoder depth.
    pub mlm_layers: usize,
    pub ffn_hidden: usize,
    pub image_size: usize,
    /// Visual positional embeddings on cross-attention keys.
    pub positions: bool,
    pub mask_strategy: MaskStrategy,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::ConfigError { detail });
        if self.m == 0 {
            return fail("m must be positive".into());
        }
        if self.d == 0 || self.d % 4 != 0 {
            return fail(format!("d={} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("heads={} must divide d={}", self.heads, self.d));
        }
        if self.mode.has_refiner() && self.mlm_layers == 0 {
            return fail("refiner depth must be at least 1".into());
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub aqn: Option<Aqn>,
    pub fc: Option<Linear>,
    pub mlm: Option<Icmlm>,
}

/// One sample's forward results. `head_probs` is whatever the mode treats
/// as its final prediction.
pub struct SampleForward {
    pub features: FeatureMap,
    pub aqn: Option<AqnOutput>,
    pub mlm: Option<IcmlmOutput>,
    pub head_probs: Tensor,
    pub prediction: Vec<u8>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = substream(seed, streams::INIT);
        let s = config.image_size;
        let backbone = Backbone::new(&mut ps, "backbone", s, s, config.d, config.positions, &mut rng)?;
        let (mut aqn, mut fc, mut mlm) = (None, None, None);
        match config.mode {
            Mode::FcHead => {
                fc = Some(Linear::new(&mut ps, "fc", config.d, config.m, &mut rng));
            }
            Mode::AqnOnly => {
                aqn = Some(Aqn::new(
                    &mut ps,
                    "aqn",
                    config.m,
                    config.d,
                    config.aqn_layers,
                    config.heads,
                    config.ffn_hidden,
                    &mut rng,
                ));
            }
            Mode::Label2label | Mode::MlmNoImage | Mode::TwoStage => {
                aqn = Some(Aqn::new(
                    &mut ps,
                    "aqn",
                    config.m,
                    config.d,
                    config.aqn_layers,
                    config.heads,
                    config.ffn_hidden,
                    &mut rng,
                ));
                mlm = Some(Icmlm::new(
                    &mut ps,
                    "mlm",
                    config.m,
                    config.d,
                    config.mlm_layers,
                    config.heads,
                    config.ffn_hidden,
                    config.mask_strategy,
                    config.mode == Mode::MlmNoImage,
                    &mut rng,
                ));
            }
        }
        Ok(Model {
            config,
            params: ps,
            backbone,
            aqn,
            fc,
            mlm,
        })
    }

    /// Forward one image. `mask_flags` marks pseudo-sentence positions to
    /// mask before the refiner, as in training; `None` is the inference
    /// path. `run_refiner = false` stops after the query network (used by
    /// the first stage of two-stage training).
    pub fn forward(
        &self,
        tape: &Tape,
        image: &Tensor,
        mask_flags: Option<&[bool]>,
        run_refiner: bool,
    ) -> Result<SampleForward> {
        let features = self.backbone.forward(tape, image)?;
        if let Some(fc) = &self.fc {
            let pooled = tape.mean_axis(&features.values, 0)?;
            let pooled = tape.reshape(&pooled, vec![1, self.config.d])?;
            let logits = tape.reshape(&fc.forward(tape, &pooled)?, vec![self.config.m])?;
            let head_probs = tape.sigmoid(&logits);
            let prediction = readout(&head_probs.to_vec());
            return Ok(SampleForward {
                features,
                aqn: None,
                mlm: None,
                head_probs,
                prediction,
            });
        }
        let aqn = self.aqn.as_ref().expect("non-fc modes carry a query network");
        let aqn_out = aqn.forward(tape, &features)?;
        let mut mlm_out = None;
        if run_refiner {
            if let Some(mlm) = &self.mlm {
                let sentence = match mask_flags {
                    Some(flags) => apply_mask(&aqn_out.pseudo_sentence, flags),
                    None => MaskedSentence::unmasked(&aqn_out.pseudo_sentence),
                };
                let embeds = embed_words(tape, &sentence, &mlm.vocab)?;
                let fm = if mlm.no_image { None } else { Some(&features) };
                mlm_out = Some(mlm.forward(tape, &embeds, fm)?);
            }
        }
        let head_probs = match &mlm_out {
            Some(out) => out.probs.clone(),
            None => aqn_out.probs.clone(),
        };
        let prediction = readout(&head_probs.to_vec());
        Ok(SampleForward {
            features,
            aqn: Some(aqn_out),
            mlm: mlm_out,
            head_probs,
            prediction,
        })
    }

    /// Per-sample objective. Modes with a refiner sum the query-network
    /// loss and `lambda` times the refiner loss over all positions; the
    /// others score their single head.
    pub fn sample_loss(
        &self,
        tape: &Tape,
        fwd: &SampleForward,
        y: &[f64],
        lambda: f64,
        scheme: &WeightScheme,
    ) -> Result<(Tensor, f64, f64)> {
        let w = scheme.weights_for(y);
        match (&fwd.aqn, &fwd.mlm) {
            (Some(aqn), Some(mlm)) => {
                let l_aqn = bce_loss(tape, &aqn.probs, y, &w)?;
                let l_mlm = bce_loss(tape, &mlm.probs, y, &w)?;
                let la = l_aqn.item();
                let lm = l_mlm.item();
                if lambda < 0.0 || !lambda.is_finite() {
                    return Err(Error::DomainError {
                        op: "sample_loss",
                        detail: format!("lambda {lambda} must be finite and nonnegative"),
                    });
                }
                let total = tape.add(&l_aqn, &tape.mul_scalar(&l_mlm, lambda))?;
                Ok((total, la, lm))
            }
            (Some(aqn), None) => {
                let l = bce_loss(tape, &aqn.probs, y, &w)?;
                let v = l.item();
                Ok((l, v, 0.0))
            }
            (None, _) => {
                let l = bce_loss(tape, &fwd.head_probs, y, &w)?;
                let v = l.item();
                Ok((l, v, 0.0))
            }
        }
    }

    /// Toggle trainability for all parameters whose name starts with any of
    /// the given prefixes. Frozen parameters keep their values and drop out
    /// of tape recording and optimizer updates.
    pub fn set_trainable(&self, prefixes: &[&str], trainable: bool) {
        for (name, tensor, _) in self.params.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                tensor.set_requires_grad(trainable);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{draw_sample, SynthSpec};

    fn small_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            m: 4,
            d: 8,
            heads: 2,
            aqn_layers: 1,
            mlm_layers: 1,
            ffn_hidden: 16,
            image_size: 8,
            positions: true,
            mask_strategy: MaskStrategy::AttributeSpecific,
        }
    }

    fn sample_image(seed: u64) -> Tensor {
        let spec = SynthSpec {
            m: 4,
            k: 2,
            attr_map: vec![0, 0, 1, 1],
            flip_eps: 0.05,
            occlusion_rho: 0.3,
            image_size: 8,
            seed,
        };
        draw_sample(&spec, 0).image
    }

    #[test]
    fn modes_carry_exactly_their_parameters() {
        let fc = Model::new(small_config(Mode::FcHead), 1).unwrap();
        assert!(fc.params.iter().all(|(n, _, _)| n.starts_with("backbone.") || n.starts_with("fc.")));
        assert!(fc.aqn.is_none() && fc.mlm.is_none());

        let aq = Model::new(small_config(Mode::AqnOnly), 1).unwrap();
        assert!(aq.params.iter().any(|(n, _, _)| n.starts_with("aqn.")));
        assert!(aq.params.iter().all(|(n, _, _)| !n.starts_with("mlm.")));

        let full = Model::new(small_config(Mode::Label2label), 1).unwrap();
        assert!(full.params.iter().any(|(n, _, _)| n.starts_with("mlm.")));
        assert!(full.params.iter().any(|(n, _, _)| n.contains("cross")));

        let blind = Model::new(small_config(Mode::MlmNoImage), 1).unwrap();
        assert!(blind
            .params
            .iter()
            .all(|(n, _, _)| !(n.starts_with("mlm.") && n.contains("cross"))));
    }

    #[test]
    fn same_seed_same_model_same_outputs() {
        let a = Model::new(small_config(Mode::Label2label), 7).unwrap();
        let b = Model::new(small_config(Mode::Label2label), 7).unwrap();
        assert_eq!(a.params.snapshot(), b.params.snapshot());
        let img = sample_image(3);
        let tape = Tape::new();
        let fa = a.forward(&tape, &img, None, true).unwrap();
        let fb = b.forward(&tape, &img, None, true).unwrap();
        assert_eq!(fa.head_probs.to_vec(), fb.head_probs.to_vec());
        assert_eq!(fa.prediction, fb.prediction);
        let c = Model::new(small_config(Mode::Label2label), 8).unwrap();
        assert_ne!(a.params.snapshot(), c.params.snapshot());
    }

    #[test]
    fn inference_path_needs_no_rng_and_is_stable() {
        let model = Model::new(small_config(Mode::Label2label), 2).unwrap();
        let img = sample_image(4);
        let tape = Tape::new();
        let x = model.forward(&tape, &img, None, true).unwrap();
        let y = model.forward(&tape, &img, None, true).unwrap();
        assert_eq!(x.head_probs.to_vec(), y.head_probs.to_vec());
        // refiner head differs from the query head in general
        let aqn_probs = x.aqn.as_ref().unwrap().probs.to_vec();
        assert_ne!(aqn_probs, x.head_probs.to_vec());
    }

    #[test]
    fn refiner_loss_reaches_no_query_network_parameters() {
        let model = Model::new(small_config(Mode::Label2label), 5).unwrap();
        let img = sample_image(5);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &img, None, true).unwrap();
        let y = [1.0, 0.0, 1.0, 0.0];
        let w = WeightScheme::Uniform.weights_for(&y);
        let l_mlm = bce_loss(&tape, &fwd.mlm.as_ref().unwrap().probs, &y, &w).unwrap();
        tape.backward(&l_mlm).unwrap();
        let grad_abs = |name: &str| -> f64 {
            model
                .params
                .get(name)
                .unwrap()
                .grad()
                .map(|g| g.iter().map(|v| v.abs()).sum())
                .unwrap_or(0.0)
        };
        // the sentence is thresholded words, so the query network is unreachable
        assert_eq!(grad_abs("aqn.cls.w"), 0.0);
        assert_eq!(grad_abs("aqn.queries"), 0.0);
        // but the image path (cross-attention into backbone) is reachable
        assert!(grad_abs("backbone.conv1.w") > 0.0);
        assert!(grad_abs("mlm.vocab.words") > 0.0);
    }

    #[test]
    fn blind_refiner_loss_never_touches_the_backbone() {
        let model = Model::new(small_config(Mode::MlmNoImage), 6).unwrap();
        let img = sample_image(6);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &img, None, true).unwrap();
        let y = [0.0, 1.0, 0.0, 1.0];
        let w = WeightScheme::Uniform.weights_for(&y);
        let l_mlm = bce_loss(&tape, &fwd.mlm.as_ref().unwrap().probs, &y, &w).unwrap();
        tape.backward(&l_mlm).unwrap();
        let conv = model.params.get("backbone.conv1.w").unwrap();
        assert!(conv.grad().map(|g| g.iter().all(|&v| v == 0.0)).unwrap_or(true));
        let vocab = model.params.get("mlm.vocab.words").unwrap();
        assert!(vocab.grad().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn every_position_is_scored_by_the_refiner_loss() {
        let model = Model::new(small_config(Mode::Label2label), 9).unwrap();
        let img = sample_image(7);
        let tape = Tape::new();
        let flags = [true, false, true, false];
        let fwd = model.forward(&tape, &img, Some(&flags), true).unwrap();
        let y = [1.0, 1.0, 0.0, 0.0];
        let (total, _, _) = model
            .sample_loss(&tape, &fwd, &y, 1.0, &WeightScheme::Uniform)
            .unwrap();
        tape.backward(&total).unwrap();
        // each refiner bias entry only sees its own position's probability,
        // so a nonzero gradient in all four means all four were scored
        let bias_grad = model.params.get("mlm.cls.b").unwrap().grad().unwrap();
        assert_eq!(bias_grad.len(), 4);
        assert!(bias_grad.iter().all(|&g| g != 0.0), "bias grads {bias_grad:?}");
    }

    #[test]
    fn lambda_scales_the_refiner_term() {
        let model = Model::new(small_config(Mode::Label2label), 10).unwrap();
        let img = sample_image(8);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &img, None, true).unwrap();
        let y = [1.0, 0.0, 0.0, 1.0];
        let (t1, la, lm) = model.sample_loss(&tape, &fwd, &y, 1.0, &WeightScheme::Uniform).unwrap();
        let (t2, la2, lm2) = model.sample_loss(&tape, &fwd, &y, 2.0, &WeightScheme::Uniform).unwrap();
        assert_eq!((la, lm), (la2, lm2));
        assert!((t1.item() - (la + lm)).abs() < 1e-12);
        assert!((t2.item() - (la + 2.0 * lm)).abs() < 1e-12);
        assert!(model
            .sample_loss(&tape, &fwd, &y, -1.0, &WeightScheme::Uniform)
            .is_err());
    }

    #[test]
    fn stage_one_skips_the_refiner() {
        let model = Model::new(small_config(Mode::TwoStage), 11).unwrap();
        let img = sample_image(9);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &img, None, false).unwrap();
        assert!(fwd.mlm.is_none());
        let aqn_probs = fwd.aqn.as_ref().unwrap().probs.to_vec();
        assert_eq!(fwd.head_probs.to_vec(), aqn_probs);
    }

    #[test]
    fn freezing_by_prefix_flips_trainability() {
        let model = Model::new(small_config(Mode::TwoStage), 12).unwrap();
        model.set_trainable(&["backbone.", "aqn."], false);
        for (name, t, _) in model.params.iter() {
            let expect = name.starts_with("mlm.");
            assert_eq!(t.requires_grad(), expect, "{name}");
        }
        model.set_trainable(&["backbone.", "aqn."], true);
        assert!(model.params.iter().all(|(_, t, _)| t.requires_grad()));
    }

    #[test]
    fn fc_head_is_a_plain_pooled_classifier() {
        let model = Model::new(small_config(Mode::FcHead), 13).unwrap();
        let img = sample_image(10);
        let tape = Tape::new();
        let fwd = model.forward(&tape, &img, None, true).unwrap();
        assert_eq!(fwd.head_probs.shape(), &[4]);
        assert!(fwd.aqn.is_none() && fwd.mlm.is_none());
        assert_eq!(fwd.prediction.len(), 4);
        let y = [1.0, 0.0, 1.0, 1.0];
        let (total, la, lm) = model.sample_loss(&tape, &fwd, &y, 1.0, &WeightScheme::Uniform).unwrap();
        assert_eq!(lm, 0.0);
        assert!((total.item() - la).abs() < 1e-15);
    }
}
