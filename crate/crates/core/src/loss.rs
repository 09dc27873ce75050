//! Weighted binary cross-entropy for both prediction heads and the combined
//! training objective. One routine serves both heads; the sign convention is
//! the standard negated sum so the optimizer minimizes.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Probabilities are clamped into [ε, 1−ε] before the log so a saturated
/// sigmoid cannot produce a non-finite loss. Tests rely on this exact value.
pub const PROB_CLAMP: f64 = 1e-12;

/// Per-sample loss weights. The exponential scheme keeps the per-attribute
/// positive ratio γ_j and weighs each term by e^{1−γ_j} on positives and
/// e^{γ_j} on negatives, so the rarer outcome of each attribute counts more.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Uniform,
    Exponential { gamma: Vec<f64> },
}

impl WeightScheme {
    pub fn exponential(gamma: Vec<f64>) -> Result<WeightScheme> {
        for (index, &value) in gamma.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(Error::GammaOutOfRange { index, value });
            }
        }
        Ok(WeightScheme::Exponential { gamma })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Exponential { .. } => "exponential",
        }
    }

    /// Weights for one sample's label vector.
    pub fn weights_for(&self, y: &[f64]) -> Vec<f64> {
        match self {
            WeightScheme::Uniform => vec![1.0; y.len()],
            WeightScheme::Exponential { gamma } => y
                .iter()
                .zip(gamma)
                .map(|(&yj, &g)| yj * (1.0 - g).exp() + (1.0 - yj) * g.exp())
                .collect(),
        }
    }
}

/// Validated constructor for the exponential scheme's weight table.
pub fn attribute_weights(gamma: &[f64]) -> Result<WeightScheme> {
    WeightScheme::exponential(gamma.to_vec())
}

/// −Σ_j w_j (y_j ln p_j + (1−y_j) ln(1−p_j)) for a single sample.
pub fn bce_loss(tape: &Tape, probs: &Tensor, y: &[f64], w: &[f64]) -> Result<Tensor> {
    let m = y.len();
    if w.len() != m || probs.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            detail: format!("probs {:?}, y {}, w {}", probs.shape(), m, w.len()),
        });
    }
    let pc = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let yt = Tensor::from_vec(vec![m], y.to_vec())?;
    let wt = Tensor::from_vec(vec![m], w.to_vec())?;
    let pos = tape.mul(&yt, &tape.log(&pc)?)?;
    let neg = tape.mul(&tape.rsub_scalar(&yt, 1.0), &tape.log(&tape.rsub_scalar(&pc, 1.0))?)?;
    let weighted = tape.mul(&wt, &tape.add(&pos, &neg)?)?;
    Ok(tape.neg(&tape.sum_all(&weighted)))
}

/// Combined objective: bce on the query head plus λ times bce on the
/// refinement head, both weighted by the same scheme.
pub fn total_loss(
    tape: &Tape,
    aqn_probs: &Tensor,
    mlm_probs: &Tensor,
    y: &[f64],
    lambda: f64,
    scheme: &WeightScheme,
) -> Result<Tensor> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::DomainError {
            op: "total_loss",
            detail: format!("lambda {lambda} must be finite and nonnegative"),
        });
    }
    let w = scheme.weights_for(y);
    let l_aqn = bce_loss(tape, aqn_probs, y, &w)?;
    let l_mlm = bce_loss(tape, mlm_probs, y, &w)?;
    Ok(tape.add(&l_aqn, &tape.mul_scalar(&l_mlm, lambda))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_bce(p: &[f64], y: &[f64], w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..p.len() {
            let pc = p[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            acc += w[j] * (y[j] * pc.ln() + (1.0 - y[j]) * (1.0 - pc).ln());
        }
        -acc
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let tape = Tape::new();
        let p = Tensor::from_vec(vec![1], vec![1.0 - 1e-9]).unwrap();
        let loss = bce_loss(&tape, &p, &[1.0], &[1.0]).unwrap().item();
        assert!(loss >= 0.0 && loss < 1e-8, "loss {loss}");
        // exactly-right labels stay nonnegative and vanish up to the clamp
        let exact = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let l = bce_loss(&tape, &exact, &[1.0, 0.0], &[1.0, 1.0]).unwrap().item();
        assert!(l >= 0.0 && l < 1e-10);
    }

    #[test]
    fn coin_flip_probability_costs_ln_two() {
        let tape = Tape::new();
        let p = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let loss = bce_loss(&tape, &p, &[1.0], &[1.0]).unwrap().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn balanced_gamma_weighted_pair() {
        let tape = Tape::new();
        let scheme = attribute_weights(&[0.5, 0.5]).unwrap();
        let w = scheme.weights_for(&[1.0, 0.0]);
        let e_half = 0.5f64.exp();
        assert!((w[0] - e_half).abs() < 1e-12 && (w[1] - e_half).abs() < 1e-12);
        let p = Tensor::from_vec(vec![2], vec![0.9, 0.2]).unwrap();
        let loss = bce_loss(&tape, &p, &[1.0, 0.0], &w).unwrap().item();
        let expect = e_half * (-(0.9f64.ln()) - 0.8f64.ln());
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.5417).abs() < 5e-4);
    }

    #[test]
    fn exponential_weight_table_points() {
        let scheme = attribute_weights(&[0.5, 0.0, 0.9]).unwrap();
        let pos = scheme.weights_for(&[1.0, 1.0, 1.0]);
        let neg = scheme.weights_for(&[0.0, 0.0, 0.0]);
        assert!((pos[0] - 0.5f64.exp()).abs() < 1e-12);
        assert!((pos[1] - 1.0f64.exp()).abs() < 1e-12);
        assert!((pos[1] - 2.7183).abs() < 1e-4);
        assert!((pos[2] - 0.1f64.exp()).abs() < 1e-12);
        assert!((pos[2] - 1.1052).abs() < 1e-4);
        assert!((neg[2] - 0.9f64.exp()).abs() < 1e-12);
        assert!((neg[2] - 2.4596).abs() < 1e-4);
        assert!(WeightScheme::Uniform.weights_for(&[1.0, 0.0]).iter().all(|&w| w == 1.0));
    }

    #[test]
    fn gamma_outside_unit_interval_is_rejected() {
        for bad in [1.2, -0.1, f64::NAN] {
            let r = attribute_weights(&[0.3, bad]);
            match r {
                Err(Error::GammaOutOfRange { index, .. }) => assert_eq!(index, 1),
                other => panic!("expected GammaOutOfRange, got {other:?}"),
            }
        }
    }

    #[test]
    fn matches_direct_formula_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let tape = Tape::new();
        for _ in 0..100 {
            let m = rng.gen_range(1..=8);
            let y: Vec<f64> = (0..m).map(|_| f64::from(rng.gen_range(0..2))).collect();
            let p: Vec<f64> = (0..m).map(|_| rng.gen_range(0.001..0.999)).collect();
            let gamma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let w = attribute_weights(&gamma).unwrap().weights_for(&y);
            let pt = Tensor::from_vec(vec![m], p.clone()).unwrap();
            let got = bce_loss(&tape, &pt, &y, &w).unwrap().item();
            let want = scalar_bce(&p, &y, &w);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn logit_gradient_is_weight_times_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let tape = Tape::new();
        let m = 6;
        let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let gamma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let w = attribute_weights(&gamma).unwrap().weights_for(&y);
        let logits = Tensor::param(vec![m], z.clone()).unwrap();
        let probs = tape.sigmoid(&logits);
        let loss = bce_loss(&tape, &probs, &y, &w).unwrap();
        tape.backward(&loss).unwrap();
        let grad = logits.grad().unwrap();
        let pv = probs.to_vec();
        for j in 0..m {
            let analytic = w[j] * (pv[j] - y[j]);
            assert!((grad[j] - analytic).abs() < 1e-10, "j={j}: {} vs {analytic}", grad[j]);
        }
    }

    #[test]
    fn combined_objective_is_linear_in_lambda() {
        let tape = Tape::new();
        let l = Tensor::from_vec(vec![3], vec![0.7, 0.3, 0.6]).unwrap();
        let p = Tensor::from_vec(vec![3], vec![0.8, 0.25, 0.55]).unwrap();
        let y = [1.0, 0.0, 1.0];
        let scheme = WeightScheme::Uniform;
        let w = scheme.weights_for(&y);
        let la = bce_loss(&tape, &l, &y, &w).unwrap().item();
        let lm = bce_loss(&tape, &p, &y, &w).unwrap().item();
        let two = total_loss(&tape, &l, &p, &y, 2.0, &scheme).unwrap().item();
        assert!((two - (la + 2.0 * lm)).abs() < 1e-12);
        assert!(matches!(
            total_loss(&tape, &l, &p, &y, -0.5, &scheme),
            Err(Error::DomainError { .. })
        ));
    }

    #[test]
    fn zero_lambda_sends_no_gradient_to_refinement_logits() {
        let tape = Tape::new();
        let za = Tensor::param(vec![2], vec![0.4, -0.2]).unwrap();
        let zm = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        let l = tape.sigmoid(&za);
        let p = tape.sigmoid(&zm);
        let y = [1.0, 0.0];
        let loss = total_loss(&tape, &l, &p, &y, 0.0, &WeightScheme::Uniform).unwrap();
        tape.backward(&loss).unwrap();
        assert!(zm.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(za.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}
