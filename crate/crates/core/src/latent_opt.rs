//! Per-image latent optimization: gradient descent on a residual `Δw` for one
//! code and one prompt.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::latent::LatentCode;
use crate::losses::{latent_optimizer_loss, LossReport};
use crate::optim::{Adam, ParamOptimizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentOptConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub weights: LossWeights,
}

impl Default for LatentOptConfig {
    fn default() -> Self {
        LatentOptConfig {
            learning_rate: 0.1,
            max_steps: 200,
            weights: LossWeights::latent_optimizer(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentOptResult {
    /// `w + Δw` at the best iterate.
    pub edited: LatentCode,
    pub delta: LatentCode,
    /// Loss of iterate `k` for `k = 0..=max_steps`; iterate 0 is `Δw = 0`.
    pub history: Vec<LossReport>,
    /// Index into `history` of the returned iterate.
    pub best_step: usize,
    /// Largest gradient norm seen over the run.
    pub max_grad_norm: f64,
}

/// Minimises the three-term loss over `Δw` starting from zero and returns the
/// iterate with the lowest total loss.
pub fn optimize_latent(
    w: &LatentCode,
    prompt: &str,
    backends: Backends<'_>,
    cfg: &LatentOptConfig,
) -> Result<LatentOptResult> {
    if cfg.max_steps == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "latent optimization needs max_steps > 0 and a positive learning rate, got {cfg:?}"
        )));
    }
    cfg.weights.validate()?;
    let text = backends.encoder.encode_text(prompt)?;
    let w = w.detach();
    let delta = Var::zeros(w.tensor().dims(), candle_core::DType::F64, w.tensor().device())?;
    let mut opt = Adam::new(vec![delta.clone()], cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.max_steps + 1);
    let mut best: Option<(f64, usize, Tensor)> = None;
    let mut max_grad_norm: f64 = 0.0;
    for step in 0..=cfg.max_steps {
        let d = LatentCode::new(delta.as_tensor().clone(), w.space())?;
        let loss = latent_optimizer_loss(&w, &d, &text, &cfg.weights, backends)
            .map_err(|e| Error::NonFinite(format!("latent optimization step {step}: {e}")))?;
        let total = loss.report.total;
        if best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            best = Some((total, step, delta.as_tensor().detach().copy()?));
        }
        history.push(loss.report);
        if step == cfg.max_steps {
            break;
        }
        let grads = loss.total.backward()?;
        if let Some(g) = grads.get(delta.as_tensor()) {
            let n = g.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
            max_grad_norm = max_grad_norm.max(n);
        }
        opt.step(&grads)?;
    }
    let (_, best_step, values) = best.expect("at least one evaluation");
    let delta = LatentCode::new(values, w.space())?;
    Ok(LatentOptResult {
        edited: w.offset(&delta)?,
        delta,
        history,
        best_step,
        max_grad_norm,
    })
}
