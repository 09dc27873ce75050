use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0)
}

/// Compare reverse-mode gradients of `f` at `point` against central finite
/// differences with step `h`. Returns the worst relative error across
/// coordinates. `f` must produce a scalar and must route all dependence on
/// its tensor argument through tape ops.
pub fn check_grad<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let x = Tensor::param(point.shape().to_vec(), point.to_vec())?;
    let tape = Tape::new();
    let loss = f(&tape, &x)?;
    tape.backward(&loss)?;
    let ad = x.grad().ok_or_else(|| Error::MissingGradient {
        name: "check_grad point".into(),
    })?;

    // probe with grad recording off so FD evaluations stay cheap
    x.set_requires_grad(false);
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        x.nudge(i, h);
        let up = f(&Tape::new(), &x)?.item();
        x.nudge(i, -2.0 * h);
        let down = f(&Tape::new(), &x)?.item();
        x.nudge(i, h);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(ad[i], fd));
    }
    Ok(worst)
}

/// Whole-model variant: `f` computes a scalar loss from `params` (captured
/// in the closure). Every parameter coordinate is probed.
pub fn check_grad_params<F>(params: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let ads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    for p in params {
        p.set_requires_grad(false);
    }
    let mut worst: f64 = 0.0;
    let mut probe = || -> Result<()> {
        for (p, ad) in params.iter().zip(&ads) {
            for i in 0..p.numel() {
                p.nudge(i, h);
                let up = f(&Tape::new())?.item();
                p.nudge(i, -2.0 * h);
                let down = f(&Tape::new())?.item();
                p.nudge(i, h);
                let fd = (up - down) / (2.0 * h);
                worst = worst.max(rel_err(ad[i], fd));
            }
        }
        Ok(())
    };
    let res = probe();
    for p in params {
        p.set_requires_grad(true);
    }
    res?;
    Ok(worst)
}
