//! Style-space latent codes and the coarse/medium/fine layer partition.

use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which latent space a code lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    /// One shared vector broadcast to every generator layer.
    #[serde(rename = "W")]
    W,
    /// A distinct vector per generator layer.
    #[serde(rename = "WPLUS")]
    WPlus,
}

impl std::fmt::Display for LatentSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LatentSpace::W => f.write_str("W"),
            LatentSpace::WPlus => f.write_str("WPLUS"),
        }
    }
}

/// An `(L, D)` point in the generator's style space.
///
/// The wrapped tensor may be part of an autodiff graph (for example `w + Δw`
/// with a trainable residual); the invariants are checked on construction.
#[derive(Debug, Clone)]
pub struct LatentCode {
    values: Tensor,
    space: LatentSpace,
}

impl LatentCode {
    pub fn new(values: Tensor, space: LatentSpace) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 2 {
            return Err(Error::Shape(format!("latent code must be (L, D), got {dims:?}")));
        }
        if dims[0] < 3 {
            return Err(Error::Shape(format!(
                "latent code needs at least 3 layers for a coarse/medium/fine split, got {}",
                dims[0]
            )));
        }
        if dims[1] == 0 {
            return Err(Error::Shape("latent dimension must be positive".into()));
        }
        let values = values.to_dtype(DType::F64)?;
        let flat = values.flatten_all()?.to_vec1::<f64>()?;
        if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent entry {pos} is {}", flat[pos])));
        }
        Ok(Self { values, space })
    }

    pub fn from_vec(layers: usize, dim: usize, data: Vec<f64>, space: LatentSpace) -> Result<Self> {
        if data.len() != layers * dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a ({layers}, {dim}) latent",
                data.len()
            )));
        }
        Self::new(Tensor::from_vec(data, (layers, dim), &Device::Cpu)?, space)
    }

    pub fn zeros(layers: usize, dim: usize, space: LatentSpace) -> Result<Self> {
        Self::new(Tensor::zeros((layers, dim), DType::F64, &Device::Cpu)?, space)
    }

    pub fn layers(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Row-major copy of the values.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.values.flatten_all()?.to_vec1::<f64>()?)
    }

    /// `self + residual`; the result stays on the autodiff graph of both operands.
    pub fn offset(&self, residual: &LatentCode) -> Result<LatentCode> {
        self.offset_by(residual.tensor())
    }

    pub fn offset_by(&self, residual: &Tensor) -> Result<LatentCode> {
        if residual.dims() != self.values.dims() {
            return Err(Error::Shape(format!(
                "residual {:?} does not match code {:?}",
                residual.dims(),
                self.values.dims()
            )));
        }
        LatentCode::new((&self.values + residual)?, self.space)
    }

    /// Same values, cut off from any autodiff graph.
    pub fn detach(&self) -> LatentCode {
        LatentCode {
            values: self.values.detach(),
            space: self.space,
        }
    }
}

/// Split of the `L` generator layers into coarse `[0, coarse_end)`,
/// medium `[coarse_end, medium_end)` and fine `[medium_end, L)` clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPartition", into = "RawPartition")]
pub struct LatentPartition {
    layers: usize,
    coarse_end: usize,
    medium_end: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    layers: usize,
    coarse_end: usize,
    medium_end: usize,
}

impl TryFrom<RawPartition> for LatentPartition {
    type Error = Error;

    fn try_from(raw: RawPartition) -> Result<Self> {
        make_partition(raw.layers, raw.coarse_end, raw.medium_end)
    }
}

impl From<LatentPartition> for RawPartition {
    fn from(p: LatentPartition) -> Self {
        RawPartition {
            layers: p.layers,
            coarse_end: p.coarse_end,
            medium_end: p.medium_end,
        }
    }
}

/// Validates `0 < coarse_end < medium_end < layers`.
pub fn make_partition(layers: usize, coarse_end: usize, medium_end: usize) -> Result<LatentPartition> {
    if coarse_end == 0 || coarse_end >= medium_end || medium_end >= layers {
        return Err(Error::Partition(format!(
            "need 0 < coarse_end < medium_end < L, got ({layers}, {coarse_end}, {medium_end})"
        )));
    }
    Ok(LatentPartition {
        layers,
        coarse_end,
        medium_end,
    })
}

/// The three clusters of a partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cluster {
    Coarse,
    Medium,
    Fine,
}

impl Cluster {
    pub const ALL: [Cluster; 3] = [Cluster::Coarse, Cluster::Medium, Cluster::Fine];

    pub fn name(self) -> &'static str {
        match self {
            Cluster::Coarse => "coarse",
            Cluster::Medium => "medium",
            Cluster::Fine => "fine",
        }
    }
}

impl LatentPartition {
    /// `(4, 8)` on 18 layers; other layer counts get the same proportions.
    pub fn default_for(layers: usize) -> Result<Self> {
        if layers == 18 {
            return make_partition(18, 4, 8);
        }
        if layers < 3 {
            return Err(Error::Partition(format!("{layers} layers cannot be split in three")));
        }
        let coarse_end = ((layers * 4) as f64 / 18.0).round().max(1.0) as usize;
        let medium_end = (((layers * 8) as f64 / 18.0).round() as usize)
            .max(coarse_end + 1)
            .min(layers - 1);
        let coarse_end = coarse_end.min(medium_end - 1);
        make_partition(layers, coarse_end, medium_end)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn coarse_end(&self) -> usize {
        self.coarse_end
    }

    pub fn medium_end(&self) -> usize {
        self.medium_end
    }

    pub fn coarse(&self) -> Range<usize> {
        0..self.coarse_end
    }

    pub fn medium(&self) -> Range<usize> {
        self.coarse_end..self.medium_end
    }

    pub fn fine(&self) -> Range<usize> {
        self.medium_end..self.layers
    }

    pub fn range(&self, cluster: Cluster) -> Range<usize> {
        match cluster {
            Cluster::Coarse => self.coarse(),
            Cluster::Medium => self.medium(),
            Cluster::Fine => self.fine(),
        }
    }

    pub fn check_code(&self, code: &LatentCode) -> Result<()> {
        if code.layers() != self.layers {
            return Err(Error::Partition(format!(
                "partition covers {} layers but the code has {}",
                self.layers,
                code.layers()
            )));
        }
        Ok(())
    }
}

impl Default for LatentPartition {
    fn default() -> Self {
        LatentPartition {
            layers: 18,
            coarse_end: 4,
            medium_end: 8,
        }
    }
}
