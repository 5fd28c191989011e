//! Residual mappers over a clustered latent code.
//!
//! A mapper sees each layer row of the code independently and returns a
//! residual `Δw` of the same `(L, D)` shape. Rows in one cluster share weights.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Cluster, LatentCode, LatentPartition};
use crate::random::gaussian;
use crate::text::TextCondition;

mod modulated;
pub mod modulation;
mod plain;

pub use modulated::{ModulatedMapper, ModulatedSubMapper, SUB_MAPPER_BLOCKS};
pub use modulation::{modulate, ConditionNet, ModulationParams, MODULATION_EPS};
pub use plain::{PlainMapper, PLAIN_HIDDEN_LAYERS};

pub(crate) type NamedVars = Vec<(String, Var)>;

const LEAKY_SLOPE: f64 = 0.2;
const PIXEL_NORM_EPS: f64 = 1e-8;

pub(crate) fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(LEAKY_SLOPE, 0.0)?)?)
}

/// Rescales each row to unit root-mean-square.
pub(crate) fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    let rms = (x.sqr()?.mean_keepdim(1)? + PIXEL_NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&rms)?)
}

/// Fully connected layer `x Wᵀ + b` on `(N, in)` rows.
#[derive(Debug)]
pub struct Affine {
    weight: Var,
    bias: Var,
}

impl Affine {
    /// He-style Gaussian weights for a leaky-ReLU network, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * in_dim as f64)).sqrt();
        let w = Tensor::from_vec(gaussian(rng, in_dim * out_dim, std), (out_dim, in_dim), &Device::Cpu)?;
        Ok(Affine {
            weight: Var::from_tensor(&w)?,
            bias: Var::zeros(out_dim, DType::F64, &Device::Cpu)?,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Affine {
            weight: Var::zeros((out_dim, in_dim), DType::F64, &Device::Cpu)?,
            bias: Var::zeros(out_dim, DType::F64, &Device::Cpu)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    /// Text-conditioned through modulation layers; one mapper serves any prompt.
    Modulated,
    /// Unconditioned; trained for a single prompt.
    Plain,
}

impl MapperKind {
    pub fn name(self) -> &'static str {
        match self {
            MapperKind::Modulated => "modulated",
            MapperKind::Plain => "plain",
        }
    }
}

/// Dimensions a mapper is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperShape {
    pub partition: LatentPartition,
    pub latent_dim: usize,
    pub embed_dim: usize,
}

pub trait Mapper: Send + Sync {
    fn kind(&self) -> MapperKind;
    fn shape(&self) -> MapperShape;

    /// Residuals for a batch of codes under one condition. Rows never interact,
    /// so each output depends only on its own input.
    fn residual_batch(&self, codes: &[LatentCode], cond: &TextCondition) -> Result<Vec<LatentCode>>;

    /// Parameters with stable names, in a fixed order.
    fn named_parameters(&self) -> Vec<(String, Var)>;

    fn residual(&self, code: &LatentCode, cond: &TextCondition) -> Result<LatentCode> {
        Ok(self
            .residual_batch(std::slice::from_ref(code), cond)?
            .pop()
            .expect("one residual per code"))
    }

    fn parameters(&self) -> Vec<Var> {
        self.named_parameters().into_iter().map(|(_, v)| v).collect()
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter from `state`, which must name each one with
    /// a matching shape.
    fn load_state(&self, state: &[(String, Tensor)]) -> Result<()> {
        for (name, var) in self.named_parameters() {
            let t = state
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F64)?)?;
        }
        Ok(())
    }
}

/// Stacks codes into `(B, L, D)` after checking them against `shape`.
fn stack_codes(codes: &[LatentCode], shape: &MapperShape) -> Result<Tensor> {
    if codes.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for c in codes {
        shape.partition.check_code(c)?;
        if c.dim() != shape.latent_dim {
            return Err(Error::Shape(format!(
                "code dimension {} does not match mapper dimension {}",
                c.dim(),
                shape.latent_dim
            )));
        }
    }
    let ts: Vec<&Tensor> = codes.iter().map(|c| c.tensor()).collect();
    Ok(Tensor::stack(&ts, 0)?)
}

/// Runs `f` on the rows of each cluster (flattened to `(B·len, D)`) and
/// reassembles the per-cluster outputs into one residual per code.
fn map_clusters<F>(codes: &[LatentCode], shape: &MapperShape, mut f: F) -> Result<Vec<LatentCode>>
where
    F: FnMut(Cluster, &Tensor) -> Result<Tensor>,
{
    let stacked = stack_codes(codes, shape)?;
    let batch = codes.len();
    let dim = shape.latent_dim;
    let mut parts = Vec::with_capacity(3);
    for cluster in Cluster::ALL {
        let range = shape.partition.range(cluster);
        let len = range.len();
        let rows = stacked.narrow(1, range.start, len)?.reshape((batch * len, dim))?;
        parts.push(f(cluster, &rows)?.reshape((batch, len, dim))?);
    }
    let all = Tensor::cat(&parts, 1)?;
    (0..batch)
        .map(|b| LatentCode::new(all.get(b)?, codes[b].space()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn leaky_relu_and_pixel_norm() {
        let x = Tensor::new(&[[-1.0f64, 2.0, 0.0, -3.0]], &Device::Cpu).unwrap();
        let l = leaky_relu(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(l[0], vec![-0.2, 2.0, 0.0, -0.6000000000000001]);
        let p = pixel_norm(&x).unwrap().to_vec2::<f64>().unwrap();
        let ms: f64 = p[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-7);
    }

    #[test]
    fn affine_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Affine::init(3, 2, &mut rng).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 0.5]], &Device::Cpu).unwrap();
        let y = a.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let w = a.weight.as_tensor().to_vec2::<f64>().unwrap();
        for (o, row) in w.iter().enumerate() {
            let want = row[0] - 2.0 * row[1] + 0.5 * row[2];
            assert!((y[0][o] - want).abs() < 1e-12);
        }
    }
}
