//! Differentiable loss terms and their weighted totals.
//!
//! Every function returns a scalar tensor on the autodiff graph of its inputs.
//! Parser masks are constants: no gradient flows through the parser.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, IdentityFeatures, Parser, PerceptualDistance};
use crate::colorspace::masked_mean_lab;
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::latent::LatentCode;
use crate::mask::mask_background;
use crate::text::TextCondition;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

fn zero_like_scalar(t: &Tensor) -> Result<Tensor> {
    // Keeps `t` on the graph so the (zero) gradient reaches its inputs.
    Ok(t.sum_all()?.affine(0.0, 0.0)?)
}

/// Euclidean norm of all entries. At the origin the value is exactly zero and
/// the (sub)gradient is taken as zero.
pub fn l2_norm(t: &Tensor) -> Result<Tensor> {
    let sum_sq = t.sqr()?.sum_all()?;
    if scalar(&sum_sq)? == 0.0 {
        return zero_like_scalar(&sum_sq);
    }
    Ok(sum_sq.sqrt()?)
}

fn vector_norm(t: &Tensor, what: &'static str) -> Result<Tensor> {
    let n = t.sqr()?.sum_all()?.sqrt()?;
    let v = scalar(&n)?;
    if v == 0.0 {
        return Err(Error::ZeroNorm(what));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} norm")));
    }
    Ok(n)
}

/// Cosine similarity of two vectors, as a plain number.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(1.0 - scalar(&clip_loss(a, b)?)?)
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn clip_loss(image_embedding: &Tensor, text_embedding: &Tensor) -> Result<Tensor> {
    if image_embedding.dims() != text_embedding.dims() || image_embedding.rank() != 1 {
        return Err(Error::Shape(format!(
            "embeddings must be equal-length vectors, got {:?} and {:?}",
            image_embedding.dims(),
            text_embedding.dims()
        )));
    }
    let na = vector_norm(image_embedding, "image embedding")?;
    let nb = vector_norm(text_embedding, "text embedding")?;
    let dot = (image_embedding * text_embedding)?.sum_all()?;
    let cos = (dot / (na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?)
}

/// Mean squared difference of identity features.
pub fn id_loss(orig: &ImageBuffer, edited: &ImageBuffer, identity: &dyn IdentityFeatures) -> Result<Tensor> {
    orig.same_shape(edited)?;
    let fa = identity.features(orig)?;
    let fb = identity.features(edited)?;
    Ok((fa - fb)?.sqr()?.mean_all()?)
}

/// Euclidean norm of the flattened residual.
pub fn norm_loss(residual: &LatentCode) -> Result<Tensor> {
    l2_norm(residual.tensor())
}

/// L1 distance between the parser-masked mean LAB colours of the two images,
/// each under its own foreground.
pub fn color_loss(orig: &ImageBuffer, edited: &ImageBuffer, parser: &dyn Parser) -> Result<Tensor> {
    orig.same_shape(edited)?;
    let mask_orig = parser.parse(&orig.detach())?;
    let mask_edit = parser.parse(&edited.detach())?;
    let mean_orig = masked_mean_lab(orig, &mask_orig)?;
    let mean_edit = masked_mean_lab(edited, &mask_edit)?;
    Ok((mean_edit - mean_orig)?.abs()?.sum_all()?)
}

/// L2 norm (root of the sum of squares, not a mean) of the pixel difference
/// restricted to pixels that are background in both images.
pub fn background_loss(orig: &ImageBuffer, edited: &ImageBuffer, parser: &dyn Parser) -> Result<Tensor> {
    orig.same_shape(edited)?;
    let bg = mask_background(&parser.parse(&orig.detach())?, &parser.parse(&edited.detach())?)?;
    let diff = (edited.tensor() - orig.tensor())?;
    l2_norm(&diff.broadcast_mul(&bg.channel_broadcast()?)?)
}

/// Pixelwise mean squared error.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<Tensor> {
    a.same_shape(b)?;
    Ok((a.tensor() - b.tensor())?.sqr()?.mean_all()?)
}

/// Perceptual distance plus `lambda2` times pixel MSE.
pub fn pti_loss(
    target: &ImageBuffer,
    recon: &ImageBuffer,
    lpips: &dyn PerceptualDistance,
    lambda2: f64,
) -> Result<Tensor> {
    Ok(pti_terms(target, recon, lpips, lambda2)?.total)
}

/// [`pti_loss`] with its two terms reported.
pub fn pti_terms(
    target: &ImageBuffer,
    recon: &ImageBuffer,
    lpips: &dyn PerceptualDistance,
    lambda2: f64,
) -> Result<WeightedLoss> {
    target.same_shape(recon)?;
    target.same_range(recon)?;
    if !(lambda2.is_finite() && lambda2 >= 0.0) {
        return Err(Error::Config(format!("lambda2 must be >= 0, got {lambda2}")));
    }
    assemble(vec![
        ("lpips", lpips.distance(target, recon)?, 1.0),
        ("l2", mse(target, recon)?, lambda2),
    ])
}

/// Per-term values and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }
}

/// A differentiable total together with its report.
#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// `Σ weight · term` over `(name, term, weight)` triples. Terms with zero
/// weight are reported but contribute nothing, not even a zero gradient path.
pub fn assemble(terms: Vec<(&'static str, Tensor, f64)>) -> Result<WeightedLoss> {
    let mut total: Option<Tensor> = None;
    let mut report = BTreeMap::new();
    for (name, term, weight) in terms {
        let value = scalar(&term)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {value}")));
        }
        report.insert(name.to_string(), value);
        if weight == 0.0 {
            continue;
        }
        let weighted = term.affine(weight, 0.0)?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::new(0f64, &candle_core::Device::Cpu)?,
    };
    Ok(WeightedLoss {
        report: LossReport {
            total: scalar(&total)?,
            terms: report,
        },
        total,
    })
}

/// The five terms of the disentangled editing loss.
#[derive(Debug, Clone)]
pub struct EditTerms {
    pub clip: Tensor,
    pub norm: Tensor,
    pub id: Tensor,
    pub color: Option<Tensor>,
    pub bg: Option<Tensor>,
}

impl EditTerms {
    pub fn assemble(self, weights: &LossWeights) -> Result<WeightedLoss> {
        let mut terms = vec![
            ("clip", self.clip, weights.clip),
            ("norm", self.norm, weights.l2),
            ("id", self.id, weights.id),
        ];
        if let Some(c) = self.color {
            terms.push(("color", c, weights.color));
        }
        if let Some(b) = self.bg {
            terms.push(("bg", b, weights.bg));
        }
        assemble(terms)
    }
}

/// Clip term of an edited image under a condition: the shape prompt alone,
/// or the average of shape and colour prompts when a colour is given.
pub fn condition_clip_loss(image_embedding: &Tensor, cond: &TextCondition) -> Result<Tensor> {
    let shape = clip_loss(image_embedding, cond.shape_embedding())?;
    match cond.color_embedding() {
        Some(c) => Ok((shape + clip_loss(image_embedding, c)?)?.affine(0.5, 0.0)?),
        None => Ok(shape),
    }
}

/// Five-term mapper loss for `w' = w + residual`.
pub fn disentangled_edit_loss(
    w: &LatentCode,
    residual: &LatentCode,
    cond: &TextCondition,
    weights: &LossWeights,
    backends: Backends<'_>,
) -> Result<WeightedLoss> {
    let g = backends.generator;
    let orig = g.synthesize(w)?;
    let edited = g.synthesize(&w.offset(residual)?)?;
    let clip = condition_clip_loss(&backends.encoder.encode_image(&edited)?, cond)?;
    EditTerms {
        clip,
        norm: norm_loss(residual)?,
        id: id_loss(&orig, &edited, backends.identity)?,
        color: Some(color_loss(&orig, &edited, backends.parser)?),
        bg: Some(background_loss(&orig, &edited, backends.parser)?),
    }
    .assemble(weights)
}

/// Three-term loss (clip, residual norm, identity) shared by per-image latent
/// optimization and the unconditioned mapper; colour and background weights
/// are ignored.
pub fn latent_optimizer_loss(
    w: &LatentCode,
    delta: &LatentCode,
    text_embedding: &Tensor,
    weights: &LossWeights,
    backends: Backends<'_>,
) -> Result<WeightedLoss> {
    let g = backends.generator;
    let orig = g.synthesize(w)?;
    let edited = g.synthesize(&w.offset(delta)?)?;
    EditTerms {
        clip: clip_loss(&backends.encoder.encode_image(&edited)?, text_embedding)?,
        norm: norm_loss(delta)?,
        id: id_loss(&orig, &edited, backends.identity)?,
        color: None,
        bg: None,
    }
    .assemble(weights)
}
