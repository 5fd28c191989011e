//! Text-conditioned feature modulation.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::{leaky_relu, Affine, NamedVars};
use crate::error::{Error, Result};

/// Default stabiliser added to the feature standard deviation.
pub const MODULATION_EPS: f64 = 1e-8;

const LAYER_NORM_EPS: f64 = 1e-5;

/// `affine(E→D) → layer norm → leaky ReLU(0.2) → affine(D→D)`.
#[derive(Debug)]
pub struct ConditionNet {
    first: Affine,
    norm_gain: Var,
    norm_bias: Var,
    second: Affine,
}

impl ConditionNet {
    pub fn new(embed_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConditionNet {
            first: Affine::init(embed_dim, dim, rng)?,
            norm_gain: Var::ones(dim, DType::F64, &Device::Cpu)?,
            norm_bias: Var::zeros(dim, DType::F64, &Device::Cpu)?,
            second: Affine::init(dim, dim, rng)?,
        })
    }

    /// A network whose output is identically zero.
    pub fn zeroed(embed_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ConditionNet {
            second: Affine::zeros(dim, dim)?,
            ..ConditionNet::new(embed_dim, dim, rng)?
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.first.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.second.out_dim()
    }

    /// Maps an `(E)` embedding to a `(D)` vector.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        if e.dims() != [self.embed_dim()] {
            return Err(Error::Shape(format!(
                "condition embedding {:?}, expected [{}]",
                e.dims(),
                self.embed_dim()
            )));
        }
        let h = self.first.forward(&e.unsqueeze(0)?)?;
        let centered = h.broadcast_sub(&h.mean_keepdim(1)?)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        let h = normed
            .broadcast_mul(self.norm_gain.as_tensor())?
            .broadcast_add(self.norm_bias.as_tensor())?;
        Ok(self.second.forward(&leaky_relu(&h)?)?.squeeze(0)?)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut NamedVars) {
        self.first.collect(&format!("{prefix}.first"), out);
        out.push((format!("{prefix}.norm.gain"), self.norm_gain.clone()));
        out.push((format!("{prefix}.norm.bias"), self.norm_bias.clone()));
        self.second.collect(&format!("{prefix}.second"), out);
    }
}

/// The scale and shift networks of one modulation layer.
#[derive(Debug)]
pub struct ModulationParams {
    pub gamma: ConditionNet,
    pub beta: ConditionNet,
}

impl ModulationParams {
    pub fn new(embed_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ModulationParams {
            gamma: ConditionNet::new(embed_dim, dim, rng)?,
            beta: ConditionNet::new(embed_dim, dim, rng)?,
        })
    }

    pub fn zeroed(embed_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(ModulationParams {
            gamma: ConditionNet::zeroed(embed_dim, dim, rng)?,
            beta: ConditionNet::zeroed(embed_dim, dim, rng)?,
        })
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut NamedVars) {
        self.gamma.collect(&format!("{prefix}.gamma"), out);
        self.beta.collect(&format!("{prefix}.beta"), out);
    }
}

/// `1 + γ(e)·(y − μ)/(σ + eps) + β(e)` for every row of `y` (shape `(N, D)`),
/// with `μ` and `σ` the mean and population standard deviation of that row.
pub fn modulate(y: &Tensor, e: &Tensor, params: &ModulationParams, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("modulation eps must be positive, got {eps}")));
    }
    let dim = params.gamma.dim();
    if y.rank() != 2 || y.dims()[1] != dim {
        return Err(Error::Shape(format!("features {:?}, expected (N, {dim})", y.dims())));
    }
    let gamma = params.gamma.forward(e)?;
    let beta = params.beta.forward(e)?;
    let centered = y.broadcast_sub(&y.mean_keepdim(1)?)?;
    // The floor only keeps sqrt differentiable when a row is constant; there
    // the numerator is zero anyway.
    let sigma = centered.sqr()?.mean_keepdim(1)?.maximum(1e-30)?.sqrt()?;
    let normalized = centered.broadcast_div(&(sigma + eps)?)?;
    Ok(normalized
        .broadcast_mul(&gamma)?
        .broadcast_add(&beta)?
        .affine(1.0, 1.0)?)
}
