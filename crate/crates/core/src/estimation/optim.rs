//! RMSprop with global-norm clipping and the epoch loop with validation-based
//! early stopping.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::objective::Objective;
use super::TrainConfig;

/// Plain RMSprop: `v = decay v + (1 - decay) g^2`, `theta -= lr g / sqrt(v + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    v: Vec<f64>,
}

impl RmsProp {
    pub fn new(dim: usize, lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for ((x, v), g) in theta.iter_mut().zip(&mut self.v).zip(grad) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *x -= self.lr * g / (*v + self.eps).sqrt();
        }
    }
}

/// Rescales `g` to norm `max_norm` if it is longer; returns the original norm.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Largest relative jitter needed in this epoch's evaluations.
    pub jitter: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_nll={:.10} val_nll={:.10} grad_norm={:.6e} lr={:.3e} jitter={:e}",
            self.epoch, self.train_nll, self.val_nll, self.grad_norm, self.lr, self.jitter
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    Converged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopping => "early_stopping",
            StopReason::Converged => "converged",
        })
    }
}

pub(crate) struct Optimized {
    pub theta: Vec<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Training { .. } => e,
        other => Error::Training {
            epoch,
            message: other.to_string(),
        },
    }
}

/// Runs the epoch loop. Each epoch evaluates the training loss and gradient
/// at the current iterate, scores that iterate on the validation span, then
/// takes one RMSprop step. The returned parameters are those of the epoch
/// with the lowest validation NLL.
pub(crate) fn optimize(
    obj: &dyn Objective,
    theta0: Vec<f64>,
    cfg: &TrainConfig,
    stream: u64,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Optimized> {
    cfg.validate()?;
    if theta0.len() != obj.num_params() {
        return Err(Error::Argument(format!(
            "initial vector has {} entries, objective expects {}",
            theta0.len(),
            obj.num_params()
        )));
    }
    let frozen = obj.frozen().map(<[bool]>::to_vec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let mut theta = theta0;
    let mut opt = RmsProp::new(theta.len(), cfg.learning_rate, cfg.rmsprop_decay, cfg.epsilon);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut stalled = 0usize;
    let halve_every = cfg.patience.div_ceil(2);
    let mut prev_train: Option<f64> = None;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let (train, mut grad) = obj.value_grad(&theta, &mut rng).map_err(|e| diverged(epoch, e))?;
        if !train.mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite training loss or gradient (NLL = {})", train.mean),
            });
        }
        let val = obj.validation(&theta).map_err(|e| diverged(epoch, e))?;
        if !val.mean.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite validation NLL {}", val.mean),
            });
        }
        if let Some(mask) = &frozen {
            grad.iter_mut().zip(mask).filter(|(_, f)| **f).for_each(|(g, _)| *g = 0.0);
        }
        let grad_norm = clip_global_norm(&mut grad, cfg.clip_norm);
        let record = EpochRecord {
            epoch,
            train_nll: train.mean,
            val_nll: val.mean,
            grad_norm,
            lr: opt.lr,
            jitter: train.max_jitter.max(val.max_jitter),
        };
        progress(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(v, _, _)| val.mean < *v) {
            best = Some((val.mean, epoch, theta.clone()));
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= cfg.patience {
                stop = StopReason::EarlyStopping;
                break;
            }
            if stalled % halve_every == 0 {
                opt.lr *= 0.5;
            }
        }
        if let Some(prev) = prev_train {
            if (train.mean - prev).abs() / prev.abs().max(1.0) < cfg.convergence_tol {
                stop = StopReason::Converged;
                break;
            }
        }
        prev_train = Some(train.mean);
        if epoch < cfg.max_epochs {
            opt.step(&mut theta, &grad);
        }
    }
    let (_, best_epoch, theta) = best.ok_or_else(|| Error::Argument("max_epochs must be at least 1".into()))?;
    Ok(Optimized {
        theta,
        best_epoch,
        history,
        stop,
    })
}
