//! Image-quality metrics, optionally restricted to a region.
//!
//! FID values depend on the feature trunk and are only comparable between
//! runs that use the same one.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backends::{IdentityFeatures, Parser};
use crate::colorspace::masked_mean_lab;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::mask::{mask_background, RegionMask};

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const FID_RIDGE: f64 = 1e-6;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    a.same_shape(b)?;
    a.same_range(b)
}

fn check_region(img: &ImageBuffer, region: &RegionMask) -> Result<Vec<f64>> {
    if region.height() != img.height() || region.width() != img.width() {
        return Err(Error::Shape(format!(
            "region {}x{} does not match image {}x{}",
            region.height(),
            region.width(),
            img.height(),
            img.width()
        )));
    }
    region.to_vec()
}

fn full_weights(img: &ImageBuffer) -> Vec<f64> {
    vec![1.0; img.height() * img.width()]
}

/// `10·log10(MAX² / MSE)` over the region, `MAX` being the range width.
/// Returns `cap` when the images agree on the region or the value exceeds it.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, region: Option<&RegionMask>, cap: f64) -> Result<f64> {
    check_pair(a, b)?;
    let weights = match region {
        Some(r) => check_region(a, r)?,
        None => full_weights(a),
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion("psnr region is empty".into()));
    }
    let (va, vb) = (a.to_vec()?, b.to_vec()?);
    let mut sse = 0.0;
    for (p, m) in weights.iter().enumerate() {
        for c in 0..3 {
            let d = va[3 * p + c] - vb[3 * p + c];
            sse += m * d * d;
        }
    }
    let mse = sse / (3.0 * total);
    if mse == 0.0 {
        return Ok(cap);
    }
    let max = a.range().width();
    Ok((10.0 * (max * max / mse).log10()).min(cap))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *x = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Separable Gaussian filter over valid positions: `(h-10) × (w-10)` output.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM (Gaussian window 11, σ 1.5) over windows lying fully inside
/// the image, each weighted by the region value at its centre, averaged over
/// the three channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, region: Option<&RegionMask>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let weights = match region {
        Some(r) => check_region(a, r)?,
        None => full_weights(a),
    };
    let half = SSIM_WINDOW / 2;
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let centre_weight: Vec<f64> = (0..oh * ow)
        .map(|i| weights[(i / ow + half) * w + i % ow + half])
        .collect();
    let total: f64 = centre_weight.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyRegion("no ssim window centre lies in the region".into()));
    }
    let range = a.range().width();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let k = gaussian_window();
    let (va, vb) = (a.to_vec()?, b.to_vec()?);
    let mut acc = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..h * w).map(|p| va[3 * p + ch]).collect();
        let y: Vec<f64> = (0..h * w).map(|p| vb[3 * p + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|m| filter_valid(m, h, w, &k));
        let mut s = 0.0;
        for i in 0..oh * ow {
            if centre_weight[i] == 0.0 {
                continue;
            }
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            s += centre_weight[i] * num / den;
        }
        acc += s / total;
    }
    Ok(acc / 3.0)
}

/// L1 distance between the region-mean LAB colours of the two images.
pub fn acd(a: &ImageBuffer, b: &ImageBuffer, region: &RegionMask) -> Result<f64> {
    a.same_shape(b)?;
    let ma = masked_mean_lab(&a.detach(), region)?;
    let mb = masked_mean_lab(&b.detach(), region)?;
    Ok((ma - mb)?.abs()?.sum_all()?.to_scalar::<f64>()?)
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Config(format!("fid needs at least 2 samples per set, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share one nonzero length".into()));
    }
    let x = DMatrix::from_row_iterator(n, d, features.iter().flatten().copied());
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += FID_RIDGE;
    }
    Ok((mean, cov))
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½)`, clamped at zero.
///
/// The trace of `(ΣaΣb)^½` is taken from the eigenvalues of the symmetric
/// matrix `Σa^½ Σb Σa^½`, which has the same spectrum.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(features_a)?;
    let (mu_b, cov_b) = moments(features_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape(format!(
            "feature sets have dimensions {} and {}",
            mu_a.len(),
            mu_b.len()
        )));
    }
    let root_a = symmetric_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    Full,
    /// Union of the two images' parsed foregrounds.
    Foreground,
    /// Pixels that are background in both images.
    Background,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Region::Full),
            "foreground" => Ok(Region::Foreground),
            "background" => Ok(Region::Background),
            other => Err(Error::Config(format!(
                "unknown region {other:?}; expected full, foreground or background"
            ))),
        }
    }
}

/// The region of a pair under `parser`.
pub fn pair_region(orig: &ImageBuffer, edited: &ImageBuffer, parser: &dyn Parser, region: Region) -> Result<RegionMask> {
    match region {
        Region::Full => RegionMask::full(orig.height(), orig.width()),
        Region::Foreground => parser.parse(orig)?.union(&parser.parse(edited)?),
        Region::Background => mask_background(&parser.parse(orig)?, &parser.parse(edited)?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub ssim: f64,
    pub psnr: f64,
    pub acd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub region: Region,
    pub n_images: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub acd: f64,
    /// Absent with fewer than two pairs.
    pub fid: Option<f64>,
    pub pairs: Vec<PairMetrics>,
}

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub orig: ImageBuffer,
    pub edited: ImageBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub psnr_cap: f64,
    /// Worker threads for the per-pair metrics.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            psnr_cap: DEFAULT_PSNR_CAP,
            jobs: 1,
        }
    }
}

struct PairEval {
    metrics: PairMetrics,
    features: (Vec<f64>, Vec<f64>),
}

fn zero_outside(img: &ImageBuffer, region: &RegionMask) -> Result<ImageBuffer> {
    ImageBuffer::new(img.tensor().broadcast_mul(&region.channel_broadcast()?)?, img.range())
}

fn evaluate_pair(
    pair: &ImagePair,
    parser: &dyn Parser,
    region: Region,
    trunk: &dyn IdentityFeatures,
    opts: &EvalOptions,
) -> Result<PairEval> {
    let with_id = |e: Error| Error::Config(format!("pair {}: {e}", pair.id));
    let (a, b) = (pair.orig.detach(), pair.edited.detach());
    let mask = pair_region(&a, &b, parser, region).map_err(with_id)?;
    let metrics = PairMetrics {
        id: pair.id.clone(),
        ssim: ssim(&a, &b, Some(&mask)).map_err(with_id)?,
        psnr: psnr(&a, &b, Some(&mask), opts.psnr_cap).map_err(with_id)?,
        acd: acd(&a, &b, &mask).map_err(with_id)?,
    };
    let feature = |img: &ImageBuffer| -> Result<Vec<f64>> {
        Ok(trunk.features(&zero_outside(img, &mask)?)?.flatten_all()?.to_vec1::<f64>()?)
    };
    let features = (feature(&a).map_err(with_id)?, feature(&b).map_err(with_id)?);
    Ok(PairEval { metrics, features })
}

/// Per-pair SSIM/PSNR/ACD averaged over pairs, plus FID between the pooled
/// trunk features of the region-restricted originals and edits (pixels outside
/// the region are set to zero).
pub fn evaluate_folder(
    pairs: &[ImagePair],
    parser: &dyn Parser,
    region: Region,
    trunk: &dyn IdentityFeatures,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Config("no image pairs to evaluate".into()));
    }
    let jobs = opts.jobs.clamp(1, pairs.len());
    let evals: Vec<PairEval> = if jobs == 1 {
        pairs
            .iter()
            .map(|p| evaluate_pair(p, parser, region, trunk, opts))
            .collect::<Result<_>>()?
    } else {
        let chunk = pairs.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|p| evaluate_pair(p, parser, region, trunk, opts))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(pairs.len());
            for h in handles {
                all.extend(h.join().expect("metric worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let n = evals.len() as f64;
    let mean = |f: fn(&PairMetrics) -> f64| evals.iter().map(|e| f(&e.metrics)).sum::<f64>() / n;
    let fid_value = if evals.len() >= 2 {
        let fa: Vec<Vec<f64>> = evals.iter().map(|e| e.features.0.clone()).collect();
        let fb: Vec<Vec<f64>> = evals.iter().map(|e| e.features.1.clone()).collect();
        Some(fid(&fa, &fb)?)
    } else {
        None
    };
    Ok(MetricReport {
        region,
        n_images: evals.len(),
        ssim: mean(|m| m.ssim),
        psnr: mean(|m| m.psnr),
        acd: mean(|m| m.acd),
        fid: fid_value,
        pairs: evals.into_iter().map(|e| e.metrics).collect(),
    })
}
