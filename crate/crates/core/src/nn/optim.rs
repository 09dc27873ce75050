use crate::error::{Error, Result};
use crate::nn::ParamSet;

/// Heavy-ball SGD: v <- mu*v + g + wd*theta; theta <- theta - lr*v.
/// Gradients are consumed (zeroed) by each step. Parameters whose
/// `requires_grad` flag is off are skipped, which is how frozen-stage
/// training leaves the backbone untouched.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!(weight_decay >= 0.0, "weight decay must be nonnegative");
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &ParamSet) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t, _)| vec![0.0; t.numel()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer bound to a different model");
        for ((name, t, _), vel) in params.iter().zip(self.velocity.iter_mut()) {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().ok_or_else(|| Error::MissingGradient { name: name.to_string() })?;
            let mut theta = t.to_vec();
            for ((th, v), g) in theta.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g + self.weight_decay * *th;
                *th -= self.lr * *v;
            }
            t.set_data(&theta)?;
            t.zero_grad();
        }
        Ok(())
    }
}

/// Per-epoch learning-rate policy. `epoch_lr` is called once at the start
/// of each epoch; plateau variants also consume the previous epoch's
/// validation metric (lower = better).
pub enum LrSchedule {
    Constant,
    Cosine { total_epochs: usize },
    Plateau(PlateauState),
}

pub struct PlateauState {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad_epochs: usize,
    scale: f64,
}

impl LrSchedule {
    pub fn plateau(patience: usize) -> LrSchedule {
        LrSchedule::Plateau(PlateauState {
            patience,
            factor: 0.1,
            best: f64::INFINITY,
            bad_epochs: 0,
            scale: 1.0,
        })
    }

    pub fn epoch_lr(&mut self, base_lr: f64, epoch: usize, prev_val_metric: Option<f64>) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine { total_epochs } => {
                let t = epoch.min(*total_epochs) as f64 / *total_epochs as f64;
                base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
            LrSchedule::Plateau(st) => {
                if let Some(metric) = prev_val_metric {
                    if metric < st.best {
                        st.best = metric;
                        st.bad_epochs = 0;
                    } else {
                        st.bad_epochs += 1;
                        if st.bad_epochs >= st.patience {
                            st.scale *= st.factor;
                            st.bad_epochs = 0;
                        }
                    }
                }
                base_lr * st.scale
            }
        }
    }
}
