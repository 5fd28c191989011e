//! Pluggable pretrained-model interfaces.
//!
//! Every algorithm in the crate talks to models only through these traits.
//! [`toy`] provides small deterministic implementations so everything runs
//! offline; adapters for real weights implement the same contracts.
//!
//! Differentiable operations return tensors that stay on the autodiff graph of
//! their inputs. The parser is the exception: its masks are constants.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::latent::LatentCode;
use crate::mask::RegionMask;

pub mod toy;

/// Style-based image generator `G`.
pub trait Generator: Send + Sync {
    fn num_layers(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn height(&self) -> usize;
    fn width(&self) -> usize;

    /// Renders a code; output range is [`crate::image::PixelRange::SignedUnit`].
    fn synthesize(&self, code: &LatentCode) -> Result<ImageBuffer>;

    /// Trainable parameters, shared with this generator (mutating a returned
    /// `Var` changes the generator).
    fn parameters(&self) -> Vec<Var>;

    /// Deep copy with independent parameter storage.
    fn duplicate(&self) -> Result<Box<dyn Generator>>;

    /// Named parameter snapshot, for checkpoints.
    fn state(&self) -> Vec<(String, Tensor)>;

    /// Short identifier recorded in run manifests.
    fn describe(&self) -> String;
}

/// Joint text/image embedding model `E_CLIP`.
pub trait JointEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Result<Tensor>;
    /// Differentiable with respect to the image pixels.
    fn encode_image(&self, image: &ImageBuffer) -> Result<Tensor>;
    fn describe(&self) -> String;
}

/// Human parser `P`, returning the editable foreground.
pub trait Parser: Send + Sync {
    fn parse(&self, image: &ImageBuffer) -> Result<RegionMask>;
    fn describe(&self) -> String;
}

/// Identity feature trunk `R`.
pub trait IdentityFeatures: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn features(&self, image: &ImageBuffer) -> Result<Tensor>;
    fn describe(&self) -> String;
}

/// Learned perceptual distance used by inversion.
pub trait PerceptualDistance: Send + Sync {
    /// Scalar tensor; zero on identical inputs, symmetric.
    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<Tensor>;
    fn describe(&self) -> String;
}

/// Image-to-latent encoder producing a pivot code.
pub trait LatentEncoder: Send + Sync {
    fn encode(&self, image: &ImageBuffer, generator: &dyn Generator) -> Result<LatentCode>;
    fn describe(&self) -> String;
}

/// The models an edit loss needs, borrowed together.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generator: &'a dyn Generator,
    pub encoder: &'a dyn JointEncoder,
    pub parser: &'a dyn Parser,
    pub identity: &'a dyn IdentityFeatures,
}

impl<'a> Backends<'a> {
    pub fn with_generator(self, generator: &'a dyn Generator) -> Backends<'a> {
        Backends { generator, ..self }
    }
}
