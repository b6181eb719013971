//! Momentum SGD, learning-rate schedules, and the two ways k workers merge
//! a step: summing parameter updates (SUBGD) or averaging weights (AWAGD).
//!
//! With mean-normalized losses and no momentum the two schemes are the same
//! algorithm in different coordinates: AWAGD at learning rate k·eta walks the
//! exact trajectory of SUBGD at eta. `scale_lr_for_workers` applies that k
//! factor where the scheme demands it.

use crate::buffer::ParamBuffer;
use crate::collectives::{Exchanger, ExchangeStrategy};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights plus velocity and step bookkeeping for one worker.
#[derive(Debug, Clone)]
pub struct SgdState<T: Scalar> {
    pub weights: ParamBuffer<T>,
    pub velocity: ParamBuffer<T>,
    pub lr: T,
    pub momentum: T,
    pub iteration: u64,
    pub epoch: u64,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(weights: ParamBuffer<T>, lr: T, momentum: T) -> Result<SgdState<T>> {
        if !(lr > T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        let velocity = ParamBuffer::zeros(weights.len());
        Ok(SgdState {
            weights,
            velocity,
            lr,
            momentum,
            iteration: 0,
            epoch: 0,
        })
    }

    /// velocity <- mu*velocity - lr*grad; weights <- weights + velocity.
    /// Plain SGD when mu = 0.
    pub fn step(&mut self, grad: &ParamBuffer<T>) -> Result<()> {
        if grad.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                left: self.weights.len(),
                right: grad.len(),
            });
        }
        for (index, g) in grad.as_slice().iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { index });
            }
        }
        let mu = self.momentum;
        let lr = self.lr;
        for (v, g) in self
            .velocity
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
        {
            *v = mu * *v - lr * *g;
        }
        for (w, v) in self
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(self.velocity.as_slice())
        {
            *w = *w + *v;
        }
        self.iteration += 1;
        Ok(())
    }
}

/// How the learning rate evolves over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant {
        base_lr: f64,
    },
    /// Scale down by `factor` every `period_epochs` epochs.
    StepDecay {
        base_lr: f64,
        factor: f64,
        period_epochs: u64,
    },
    /// base_lr * (1 - iteration/max_iterations)^power, non-increasing,
    /// reaching zero at the final iteration.
    PolyDecay {
        base_lr: f64,
        max_iterations: u64,
        power: f64,
    },
}

impl Schedule {
    pub fn step_decay(base_lr: f64) -> Schedule {
        Schedule::StepDecay {
            base_lr,
            factor: 0.1,
            period_epochs: 20,
        }
    }

    pub fn poly_decay(base_lr: f64, max_iterations: u64) -> Schedule {
        Schedule::PolyDecay {
            base_lr,
            max_iterations,
            power: 0.5,
        }
    }

    /// Learning rate for the given epoch and global iteration
    /// (iteration = epoch * minibatches_per_epoch + step).
    pub fn lr_at(&self, epoch: u64, iteration: u64) -> f64 {
        match *self {
            Schedule::Constant { base_lr } => base_lr,
            Schedule::StepDecay {
                base_lr,
                factor,
                period_epochs,
            } => base_lr * factor.powi((epoch / period_epochs) as i32),
            Schedule::PolyDecay {
                base_lr,
                max_iterations,
                power,
            } => {
                let frac = (iteration.min(max_iterations) as f64) / (max_iterations as f64);
                base_lr * (1.0 - frac).powf(power)
            }
        }
    }
}

/// How worker results merge into the next shared iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineScheme {
    /// Sum of per-worker parameter updates applied to the pre-step weights.
    Subgd,
    /// Average of per-worker post-step weights.
    Awagd,
}

impl CombineScheme {
    pub fn parse(s: &str) -> Option<CombineScheme> {
        match s {
            "subgd" => Some(CombineScheme::Subgd),
            "awagd" => Some(CombineScheme::Awagd),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CombineScheme::Subgd => "subgd",
            CombineScheme::Awagd => "awagd",
        }
    }
}

/// AWAGD needs the learning rate scaled by the worker count; SUBGD runs at
/// the sequential rate.
pub fn scale_lr_for_workers(lr: f64, workers: usize, scheme: CombineScheme) -> f64 {
    match scheme {
        CombineScheme::Awagd => lr * workers as f64,
        CombineScheme::Subgd => lr,
    }
}

/// Per-worker batch of b examples across k workers acts like one batch of
/// b*k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectiveBatch {
    pub per_worker: usize,
    pub workers: usize,
}

impl EffectiveBatch {
    pub fn effective(&self) -> usize {
        self.per_worker * self.workers
    }
}

/// SUBGD: allreduce the local update delta and apply the summed delta to the
/// pre-step weights. A single-worker world returns the post-step weights
/// directly so the degenerate case stays bit-identical to sequential SGD.
pub fn subgd_combine<T: Scalar>(
    ex: &mut Exchanger,
    strategy: ExchangeStrategy,
    before: &ParamBuffer<T>,
    after: &ParamBuffer<T>,
) -> Result<ParamBuffer<T>> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    if ex.world_size() == 1 {
        return Ok(after.clone());
    }
    let mut delta = after.clone();
    delta.sub_inplace(before)?;
    let summed = ex.strategy_allreduce(strategy, &delta)?;
    let mut out = before.clone();
    out.add_inplace(&summed)?;
    Ok(out)
}

/// AWAGD: allreduce the post-step weights and divide by the worker count.
pub fn awagd_combine<T: Scalar>(
    ex: &mut Exchanger,
    strategy: ExchangeStrategy,
    after: &ParamBuffer<T>,
) -> Result<ParamBuffer<T>> {
    let k = ex.world_size();
    let mut out = ex.strategy_allreduce(strategy, after)?;
    out.scale_inplace(T::one() / T::of_f64(k as f64));
    Ok(out)
}
