//! Text-driven garment editing in the layered latent space of a style-based
//! generator.
//!
//! The crate covers generator fine-tuning around a pivot code, per-image
//! latent optimization, text-modulated and plain residual mappers with their
//! training loop, and region-restricted image metrics. Pretrained models are
//! reached only through the traits in [`backends`]; [`backends::toy`] ships
//! small deterministic stand-ins so everything runs offline.

pub mod backends;
pub mod colorspace;
pub mod config;
pub mod error;
pub mod image;
pub mod inversion;
pub mod io;
pub mod latent_opt;
pub mod losses;
pub mod mapper;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod text;
pub mod training;

pub mod latent;
mod random;

pub use config::{EditConfig, LossWeights, OptimizerKind};
pub use error::{Error, Result};
pub use image::{ImageBuffer, PixelRange};
pub use latent::{make_partition, Cluster, LatentCode, LatentPartition, LatentSpace};
pub use losses::LossReport;
pub use mapper::{Mapper, MapperKind, MapperShape, ModulatedMapper, PlainMapper};
pub use metrics::{MetricReport, Region};
pub use mask::{mask_background, Rect, RegionMask};
pub use text::TextCondition;
