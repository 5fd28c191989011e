use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{leaky_relu, map_clusters, pixel_norm, Affine, Mapper, MapperKind, MapperShape, NamedVars};
use crate::error::{Error, Result};
use crate::latent::{Cluster, LatentCode};
use crate::text::TextCondition;

pub const PLAIN_HIDDEN_LAYERS: usize = 4;

#[derive(Debug)]
struct PlainSub {
    hidden: Vec<Affine>,
    head: Affine,
}

impl PlainSub {
    fn forward(&self, rows: &Tensor) -> Result<Tensor> {
        let mut h = pixel_norm(rows)?;
        for layer in &self.hidden {
            h = leaky_relu(&layer.forward(&h)?)?;
        }
        self.head.forward(&h)
    }
}

/// Unconditioned three-cluster mapper, one per prompt. The condition passed to
/// [`Mapper::residual_batch`] is ignored.
#[derive(Debug)]
pub struct PlainMapper {
    shape: MapperShape,
    subs: [PlainSub; 3],
}

impl PlainMapper {
    pub fn new(shape: MapperShape, seed: u64) -> Result<Self> {
        Self::build(shape, seed, true)
    }

    pub fn with_random_head(shape: MapperShape, seed: u64) -> Result<Self> {
        Self::build(shape, seed, false)
    }

    fn build(shape: MapperShape, seed: u64, zero_head: bool) -> Result<Self> {
        if shape.latent_dim == 0 {
            return Err(Error::Shape("mapper dimensions must be positive".into()));
        }
        let d = shape.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sub = || -> Result<PlainSub> {
            let hidden = (0..PLAIN_HIDDEN_LAYERS)
                .map(|_| Affine::init(d, d, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let head = if zero_head { Affine::zeros(d, d)? } else { Affine::init(d, d, &mut rng)? };
            Ok(PlainSub { hidden, head })
        };
        let subs = [sub()?, sub()?, sub()?];
        Ok(PlainMapper { shape, subs })
    }

    /// Residual without a condition.
    pub fn forward(&self, code: &LatentCode) -> Result<LatentCode> {
        Ok(self.forward_batch(std::slice::from_ref(code))?.pop().expect("one residual per code"))
    }

    pub fn forward_batch(&self, codes: &[LatentCode]) -> Result<Vec<LatentCode>> {
        map_clusters(codes, &self.shape, |cluster, rows| self.subs[cluster as usize].forward(rows))
    }
}

impl Mapper for PlainMapper {
    fn kind(&self) -> MapperKind {
        MapperKind::Plain
    }

    fn shape(&self) -> MapperShape {
        self.shape
    }

    fn residual_batch(&self, codes: &[LatentCode], _cond: &TextCondition) -> Result<Vec<LatentCode>> {
        self.forward_batch(codes)
    }

    fn named_parameters(&self) -> Vec<(String, Var)> {
        let mut out: NamedVars = Vec::new();
        for cluster in Cluster::ALL {
            let sub = &self.subs[cluster as usize];
            for (i, layer) in sub.hidden.iter().enumerate() {
                layer.collect(&format!("{}.hidden{i}", cluster.name()), &mut out);
            }
            sub.head.collect(&format!("{}.head", cluster.name()), &mut out);
        }
        out
    }
}
