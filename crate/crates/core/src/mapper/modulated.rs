use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::modulation::{modulate, ModulationParams, MODULATION_EPS};
use super::{leaky_relu, map_clusters, pixel_norm, Affine, Mapper, MapperKind, MapperShape, NamedVars};
use crate::error::{Error, Result};
use crate::latent::{Cluster, LatentCode};
use crate::text::TextCondition;

pub const SUB_MAPPER_BLOCKS: usize = 5;

/// In the fine cluster with a colour prompt, blocks before this index see the
/// shape embedding and the rest see the colour embedding.
const FINE_COLOR_FROM_BLOCK: usize = 3;

#[derive(Debug)]
struct Block {
    linear: Affine,
    modulation: ModulationParams,
}

/// Five `pixel norm → affine → modulation → leaky ReLU` blocks followed by an
/// output affine that starts at zero.
#[derive(Debug)]
pub struct ModulatedSubMapper {
    blocks: Vec<Block>,
    head: Affine,
}

impl ModulatedSubMapper {
    fn new(dim: usize, embed_dim: usize, zero_head: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let blocks = (0..SUB_MAPPER_BLOCKS)
            .map(|_| {
                Ok(Block {
                    linear: Affine::init(dim, dim, rng)?,
                    modulation: ModulationParams::new(embed_dim, dim, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = if zero_head {
            Affine::zeros(dim, dim)?
        } else {
            Affine::init(dim, dim, rng)?
        };
        Ok(ModulatedSubMapper { blocks, head })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `rows` is `(N, D)`; `embeddings[i]` conditions block `i`.
    pub fn forward(&self, rows: &Tensor, embeddings: &[&Tensor; SUB_MAPPER_BLOCKS]) -> Result<Tensor> {
        let mut h = rows.clone();
        for (block, e) in self.blocks.iter().zip(embeddings) {
            h = pixel_norm(&h)?;
            h = block.linear.forward(&h)?;
            h = modulate(&h, e, &block.modulation, MODULATION_EPS)?;
            h = leaky_relu(&h)?;
        }
        self.head.forward(&h)
    }

    fn collect(&self, prefix: &str, out: &mut NamedVars) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.linear.collect(&format!("{prefix}.block{i}.linear"), out);
            b.modulation.collect(&format!("{prefix}.block{i}.modulation"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

/// Three text-modulated sub-mappers, one per latent cluster.
///
/// Coarse and medium clusters are conditioned on the shape prompt. The fine
/// cluster additionally receives the colour prompt in its last two blocks, or
/// a neutral (zero) embedding everywhere when fine injection is disabled.
#[derive(Debug)]
pub struct ModulatedMapper {
    shape: MapperShape,
    inject_fine: bool,
    subs: [ModulatedSubMapper; 3],
    neutral: Tensor,
}

impl ModulatedMapper {
    pub fn new(shape: MapperShape, inject_fine: bool, seed: u64) -> Result<Self> {
        Self::build(shape, inject_fine, seed, true)
    }

    /// Same architecture with a random output head, so the residual is not
    /// zero at initialisation.
    pub fn with_random_head(shape: MapperShape, inject_fine: bool, seed: u64) -> Result<Self> {
        Self::build(shape, inject_fine, seed, false)
    }

    fn build(shape: MapperShape, inject_fine: bool, seed: u64, zero_head: bool) -> Result<Self> {
        if shape.latent_dim == 0 || shape.embed_dim == 0 {
            return Err(Error::Shape("mapper dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sub = || ModulatedSubMapper::new(shape.latent_dim, shape.embed_dim, zero_head, &mut rng);
        let subs = [sub()?, sub()?, sub()?];
        Ok(ModulatedMapper {
            shape,
            inject_fine,
            subs,
            neutral: Tensor::zeros(shape.embed_dim, candle_core::DType::F64, &Device::Cpu)?,
        })
    }

    pub fn inject_fine(&self) -> bool {
        self.inject_fine
    }

    pub fn sub_mapper(&self, cluster: Cluster) -> &ModulatedSubMapper {
        &self.subs[cluster as usize]
    }

    /// The embedding fed to each block of `cluster`'s sub-mapper.
    pub fn block_embeddings<'a>(&'a self, cluster: Cluster, cond: &'a TextCondition) -> [&'a Tensor; SUB_MAPPER_BLOCKS] {
        let shape = cond.shape_embedding();
        match (cluster, self.inject_fine, cond.color_embedding()) {
            (Cluster::Fine, false, _) => [&self.neutral; SUB_MAPPER_BLOCKS],
            (Cluster::Fine, true, Some(color)) => {
                std::array::from_fn(|i| if i < FINE_COLOR_FROM_BLOCK { shape } else { color })
            }
            _ => [shape; SUB_MAPPER_BLOCKS],
        }
    }
}

impl Mapper for ModulatedMapper {
    fn kind(&self) -> MapperKind {
        MapperKind::Modulated
    }

    fn shape(&self) -> MapperShape {
        self.shape
    }

    fn residual_batch(&self, codes: &[LatentCode], cond: &TextCondition) -> Result<Vec<LatentCode>> {
        if cond.embed_dim() != self.shape.embed_dim {
            return Err(Error::Shape(format!(
                "condition embedding dimension {} does not match mapper {}",
                cond.embed_dim(),
                self.shape.embed_dim
            )));
        }
        map_clusters(codes, &self.shape, |cluster, rows| {
            self.subs[cluster as usize].forward(rows, &self.block_embeddings(cluster, cond))
        })
    }

    fn named_parameters(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for cluster in Cluster::ALL {
            self.subs[cluster as usize].collect(cluster.name(), &mut out);
        }
        out
    }
}
