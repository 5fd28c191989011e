//! Generator fine-tuning around a fixed pivot code.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Generator, LatentEncoder, PerceptualDistance};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::latent::{LatentCode, LatentSpace};
use crate::losses::{mse, pti_terms, LossReport};
use crate::optim::{Adam, ParamOptimizer};
use crate::random::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtiConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once `|loss_k - loss_{k-1}|` drops below this.
    pub tolerance: f64,
    /// Weight of the pixel MSE next to the perceptual distance.
    pub lambda2: f64,
}

impl Default for PtiConfig {
    fn default() -> Self {
        PtiConfig {
            learning_rate: 5e-4,
            max_steps: 3500,
            tolerance: 1e-4,
            lambda2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    Converged,
}

pub struct InversionResult {
    pub pivot: LatentCode,
    pub tuned_generator: Box<dyn Generator>,
    /// Loss before each parameter update, then at the stopping point.
    pub history: Vec<LossReport>,
    /// Parameter updates applied.
    pub steps_used: usize,
    pub stop: StopReason,
}

/// Tunes a copy of `generator` so that it renders `target` from the frozen
/// `pivot`. The input generator is never modified.
pub fn pti_tune(
    target: &ImageBuffer,
    pivot: &LatentCode,
    generator: &dyn Generator,
    lpips: &dyn PerceptualDistance,
    cfg: &PtiConfig,
) -> Result<InversionResult> {
    if !(cfg.learning_rate > 0.0) || !(cfg.tolerance >= 0.0) {
        return Err(Error::Config(format!("invalid inversion settings {cfg:?}")));
    }
    if target.height() != generator.height() || target.width() != generator.width() {
        return Err(Error::Shape(format!(
            "target is {}x{} but the generator renders {}x{}",
            target.height(),
            target.width(),
            generator.height(),
            generator.width()
        )));
    }
    let target = target.to_signed()?.detach();
    let pivot = pivot.detach();
    let tuned = generator.duplicate()?;
    let mut history = Vec::new();
    if cfg.max_steps == 0 {
        return Ok(InversionResult {
            pivot,
            tuned_generator: tuned,
            history,
            steps_used: 0,
            stop: StopReason::MaxSteps,
        });
    }
    let mut opt = Adam::new(tuned.parameters(), cfg.learning_rate)?;
    let mut steps_used = 0;
    let mut stop = StopReason::MaxSteps;
    loop {
        let recon = tuned.synthesize(&pivot)?;
        let loss = pti_terms(&target, &recon, lpips, cfg.lambda2)
            .map_err(|e| Error::NonFinite(format!("inversion step {steps_used}: {e}")))?;
        let value = loss.report.total;
        let previous = history.last().map(|r: &LossReport| r.total);
        history.push(loss.report);
        if let Some(p) = previous {
            if (p - value).abs() < cfg.tolerance {
                stop = StopReason::Converged;
                break;
            }
        }
        if steps_used == cfg.max_steps {
            break;
        }
        opt.step(&loss.total.backward()?)?;
        steps_used += 1;
    }
    Ok(InversionResult {
        pivot,
        tuned_generator: tuned,
        history,
        steps_used,
        stop,
    })
}

/// Pivot code from an attached encoder.
pub fn encode_pivot(
    image: &ImageBuffer,
    generator: &dyn Generator,
    encoder: Option<&dyn LatentEncoder>,
) -> Result<LatentCode> {
    let encoder = encoder.ok_or_else(|| {
        Error::EncoderUnavailable(
            "no image encoder is attached; use the direct latent optimization fallback (OptimizingEncoder)".into(),
        )
    })?;
    let code = encoder.encode(image, generator)?;
    if code.layers() != generator.num_layers() || code.dim() != generator.latent_dim() {
        return Err(Error::Shape(format!(
            "encoder returned ({}, {}) but the generator expects ({}, {})",
            code.layers(),
            code.dim(),
            generator.num_layers(),
            generator.latent_dim()
        )));
    }
    Ok(code)
}

/// Encoder fallback: gradient descent on the pixel MSE of a code, starting
/// from a small seeded perturbation of the origin. Returns the best iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizingEncoder {
    pub steps: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl OptimizingEncoder {
    pub fn new(seed: u64) -> Self {
        OptimizingEncoder {
            steps: 200,
            learning_rate: 0.05,
            init_std: 0.01,
            seed,
        }
    }
}

impl LatentEncoder for OptimizingEncoder {
    fn encode(&self, image: &ImageBuffer, generator: &dyn Generator) -> Result<LatentCode> {
        let (l, d) = (generator.num_layers(), generator.latent_dim());
        let target = image.to_signed()?.detach();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let init = Tensor::from_vec(gaussian(&mut rng, l * d, self.init_std), (l, d), &Device::Cpu)?;
        let var = Var::from_tensor(&init.to_dtype(DType::F64)?)?;
        let mut opt = Adam::new(vec![var.clone()], self.learning_rate)?;
        let mut best: Option<(f64, Tensor)> = None;
        for step in 0..=self.steps {
            let code = LatentCode::new(var.as_tensor().clone(), LatentSpace::WPlus)?;
            let loss = mse(&target, &generator.synthesize(&code)?)?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("encoder step {step}: loss {value}")));
            }
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, var.as_tensor().detach().copy()?));
            }
            if step < self.steps {
                opt.step(&loss.backward()?)?;
            }
        }
        let (_, values) = best.expect("at least one evaluation");
        LatentCode::new(values, LatentSpace::WPlus)
    }

    fn describe(&self) -> String {
        format!(
            "direct-latent-optimization(steps={}, lr={}, seed={})",
            self.steps, self.learning_rate, self.seed
        )
    }
}
