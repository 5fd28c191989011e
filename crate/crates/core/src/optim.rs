//! First-order optimizers behind one interface.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::config::OptimizerKind;
use crate::error::Result;

pub trait ParamOptimizer: Send {
    /// Applies one update from `grads`. Variables without a gradient are left alone.
    fn step(&mut self, grads: &GradStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn name(&self) -> &'static str;
}

/// Adam without weight decay.
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        Ok(Adam {
            inner: AdamW::new(vars, params)?,
        })
    }
}

impl ParamOptimizer for Adam {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        Ok(self.inner.step(grads)?)
    }

    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    fn name(&self) -> &'static str {
        "adam"
    }
}

/// Hyperparameters of [`Ranger`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangerParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps between lookahead synchronisations.
    pub k: usize,
    pub alpha: f64,
    /// Variance rectification is applied once the SMA length exceeds this.
    pub sma_threshold: f64,
}

impl RangerParams {
    pub fn with_lr(lr: f64) -> Self {
        RangerParams {
            lr,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            k: 6,
            alpha: 0.5,
            sma_threshold: 5.0,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    slow: Tensor,
}

/// Rectified Adam with lookahead.
pub struct Ranger {
    params: RangerParams,
    slots: Vec<Slot>,
    t: usize,
}

impl Ranger {
    pub fn new(vars: Vec<Var>, params: RangerParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                let slow = var.as_tensor().detach().copy()?;
                Ok(Slot { var, m, v, slow })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ranger { params, slots, t: 0 })
    }

    pub fn params(&self) -> RangerParams {
        self.params
    }

    /// Step size multiplier and whether the adaptive denominator is used at step `t`.
    fn rectification(&self, t: usize) -> (f64, bool) {
        let RangerParams { beta1, beta2, sma_threshold, .. } = self.params;
        let t = t as f64;
        let bias1 = 1.0 - beta1.powf(t);
        let b2t = beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        if rho_t > sma_threshold {
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            (r * (1.0 - b2t).sqrt() / bias1, true)
        } else {
            (1.0 / bias1, false)
        }
    }
}

impl ParamOptimizer for Ranger {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let (scale, adaptive) = self.rectification(self.t);
        let RangerParams { lr, beta1, beta2, eps, k, alpha, .. } = self.params;
        let sync = k > 0 && self.t % k == 0;
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = if adaptive {
                (&slot.m / (slot.v.sqrt()? + eps)?)?
            } else {
                slot.m.clone()
            };
            let fast = (slot.var.as_tensor() - (update * (lr * scale))?)?;
            if sync {
                slot.slow = (&slot.slow + ((&fast - &slot.slow)? * alpha)?)?;
                slot.var.set(&slot.slow)?;
            } else {
                slot.var.set(&fast)?;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    fn name(&self) -> &'static str {
        "ranger"
    }
}

pub fn build_optimizer(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Box<dyn ParamOptimizer>> {
    Ok(match kind {
        OptimizerKind::Adam => Box::new(Adam::new(vars, lr)?),
        OptimizerKind::Ranger => Box::new(Ranger::new(vars, RangerParams::with_lr(lr))?),
    })
}
