//! Deterministic toy backends.
//!
//! Small enough to run thousands of optimization steps in seconds, yet
//! structured so that every algorithm in the crate has something meaningful
//! to do: the generator paints a "garment" rectangle, a "head" patch and the
//! remaining background with colours driven by the latent code; the joint
//! encoder looks at mean colour and a top-versus-bottom contrast; the parser
//! knows where the garment is; identity features only look at the head.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backends, Generator, IdentityFeatures, JointEncoder, Parser, PerceptualDistance};
use crate::error::{Error, Result};
use crate::random::gaussian;
use crate::image::{ImageBuffer, PixelRange};
use crate::latent::{Cluster, LatentCode, LatentPartition, LatentSpace};
use crate::mask::{Rect, RegionMask};

const BASIS_FIELDS: usize = 5;
const TEXTURE_PERIOD: f64 = 8.0;

/// Which latent bands drive each spatial field: garment, head, rest, ramp, texture.
const FIELD_BANDS: [&[Cluster]; BASIS_FIELDS] = [
    &[Cluster::Fine],
    &[Cluster::Coarse, Cluster::Medium],
    &[Cluster::Medium],
    &[Cluster::Coarse],
    &[Cluster::Coarse],
];
/// Relative colour strength of each spatial field.
const FIELD_GAIN: [f64; BASIS_FIELDS] = [1.0, 0.5, 0.25, 1.0, 0.5];

fn cpu() -> Device {
    Device::Cpu
}

/// Where the toy person sits in an `H x W` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLayout {
    pub height: usize,
    pub width: usize,
    pub head: Rect,
    pub garment: Rect,
}

impl ToyLayout {
    pub fn for_size(height: usize, width: usize) -> Self {
        ToyLayout {
            height,
            width,
            head: Rect::new(0, 3 * width / 8, height / 4, 5 * width / 8),
            garment: Rect::new(height / 4, width / 8, 7 * height / 8, 7 * width / 8),
        }
    }
}

/// Hyper-parameters of [`ToyGenerator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyGeneratorConfig {
    pub layers: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Scale of the latent-to-hidden projection.
    pub latent_gain: f64,
    /// Scale of the hidden-to-colour projection.
    pub color_gain: f64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        ToyGeneratorConfig {
            layers: 18,
            dim: 16,
            height: 32,
            width: 32,
            hidden: 32,
            seed: 0,
            latent_gain: 1.0,
            color_gain: 6.0,
        }
    }
}

/// A two-layer decoder from the flattened code to per-region colours,
/// broadcast over fixed spatial fields and squashed by `tanh`.
///
/// Hidden units are split across the coarse, medium and fine layer bands at
/// initialisation: coarse layers shape the garment and head, medium layers
/// colour the head and background, fine layers colour the garment.
///
/// `image = tanh(fields · (W2 tanh(W1 vec(w) + b1) + b2) + bias)`.
///
/// The code `w = 0` renders exactly mid-gray with the initial parameters.
pub struct ToyGenerator {
    config: ToyGeneratorConfig,
    layout: ToyLayout,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    fields: Var,
    bias: Var,
}

const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "fields", "bias"];

impl ToyGenerator {
    pub fn new(config: ToyGeneratorConfig) -> Result<Self> {
        let ToyGeneratorConfig {
            layers,
            dim,
            height,
            width,
            hidden,
            seed,
            latent_gain,
            color_gain,
        } = config;
        if layers < 3 || dim == 0 || height < 2 || width < 2 || hidden == 0 {
            return Err(Error::Config(format!("invalid toy generator dims {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6765_6e65_7261_746f);
        let partition = LatentPartition::default_for(layers)?;
        let flat = layers * dim;
        let band_of = |unit: usize| Cluster::ALL[unit % Cluster::ALL.len()];
        let units_in = |band: Cluster| (0..hidden).filter(|&j| band_of(j) == band).count().max(1);
        let mut w1 = vec![0.0; hidden * flat];
        for j in 0..hidden {
            let layers = partition.range(band_of(j));
            let cols = layers.start * dim..layers.end * dim;
            let std = latent_gain / (cols.len() as f64).sqrt();
            let row = gaussian(&mut rng, cols.len(), std);
            w1[j * flat + cols.start..j * flat + cols.end].copy_from_slice(&row);
        }
        let mut w2 = vec![0.0; BASIS_FIELDS * 3 * hidden];
        for field in 0..BASIS_FIELDS {
            for ch in 0..3 {
                let row = field * 3 + ch;
                for j in 0..hidden {
                    let band = band_of(j);
                    if FIELD_BANDS[field].contains(&band) {
                        let std = FIELD_GAIN[field] * color_gain / (units_in(band) as f64).sqrt();
                        w2[row * hidden + j] = gaussian(&mut rng, 1, std)[0];
                    }
                }
            }
        }
        let layout = ToyLayout::for_size(height, width);
        let fields = spatial_fields(&layout);
        let dev = cpu();
        Ok(ToyGenerator {
            config,
            layout,
            w1: Var::from_tensor(&Tensor::from_vec(w1, (hidden, flat), &dev)?)?,
            b1: Var::zeros(hidden, DType::F64, &dev)?,
            w2: Var::from_tensor(&Tensor::from_vec(w2, (BASIS_FIELDS * 3, hidden), &dev)?)?,
            b2: Var::zeros(BASIS_FIELDS * 3, DType::F64, &dev)?,
            fields: Var::from_tensor(&Tensor::from_vec(
                fields,
                (height * width, BASIS_FIELDS),
                &dev,
            )?)?,
            bias: Var::zeros((height * width, 3), DType::F64, &dev)?,
        })
    }

    /// Rebuilds a generator from a [`Generator::state`] snapshot.
    pub fn from_state(config: ToyGeneratorConfig, state: &[(String, Tensor)]) -> Result<Self> {
        let g = ToyGenerator::new(config)?;
        for (name, var) in PARAM_NAMES.iter().zip(g.vars()) {
            let t = state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing generator tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "generator tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F64)?)?;
        }
        Ok(g)
    }

    pub fn config(&self) -> &ToyGeneratorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ToyLayout {
        &self.layout
    }

    fn vars(&self) -> [&Var; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.fields, &self.bias]
    }
}

fn spatial_fields(layout: &ToyLayout) -> Vec<f64> {
    let (h, w) = (layout.height, layout.width);
    let g = layout.garment;
    let span = (g.bottom - g.top).saturating_sub(1).max(1) as f64;
    let mut out = Vec::with_capacity(h * w * BASIS_FIELDS);
    for r in 0..h {
        for c in 0..w {
            let in_garment = g.contains(r, c);
            let in_head = layout.head.contains(r, c);
            let garment = if in_garment { 1.0 } else { 0.0 };
            let head = if in_head { 1.0 } else { 0.0 };
            let rest = 1.0 - garment - head;
            let ramp = if in_garment {
                1.0 - 2.0 * (r - g.top) as f64 / span
            } else {
                0.0
            };
            let tau = std::f64::consts::TAU;
            let texture =
                0.5 * (tau * r as f64 / TEXTURE_PERIOD).sin() * (tau * c as f64 / TEXTURE_PERIOD).sin();
            out.extend_from_slice(&[garment, head, rest, ramp, texture]);
        }
    }
    out
}

impl Generator for ToyGenerator {
    fn num_layers(&self) -> usize {
        self.config.layers
    }

    fn latent_dim(&self) -> usize {
        self.config.dim
    }

    fn height(&self) -> usize {
        self.config.height
    }

    fn width(&self) -> usize {
        self.config.width
    }

    fn synthesize(&self, code: &LatentCode) -> Result<ImageBuffer> {
        let c = &self.config;
        if code.layers() != c.layers || code.dim() != c.dim {
            return Err(Error::Shape(format!(
                "generator expects ({}, {}) codes, got ({}, {})",
                c.layers,
                c.dim,
                code.layers(),
                code.dim()
            )));
        }
        let v = code.tensor().reshape((1, c.layers * c.dim))?;
        let hidden = v
            .matmul(&self.w1.as_tensor().t()?)?
            .broadcast_add(self.b1.as_tensor())?
            .tanh()?;
        let colors = hidden
            .matmul(&self.w2.as_tensor().t()?)?
            .broadcast_add(self.b2.as_tensor())?
            .reshape((BASIS_FIELDS, 3))?;
        let pre = (self.fields.as_tensor().matmul(&colors)? + self.bias.as_tensor())?;
        let img = pre.tanh()?.reshape((c.height, c.width, 3))?;
        ImageBuffer::new(img, PixelRange::SignedUnit)
    }

    fn parameters(&self) -> Vec<Var> {
        self.vars().into_iter().cloned().collect()
    }

    fn duplicate(&self) -> Result<Box<dyn Generator>> {
        Ok(Box::new(ToyGenerator::from_state(self.config, &self.state())?))
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        PARAM_NAMES
            .iter()
            .zip(self.vars())
            .map(|(n, v)| (n.to_string(), v.as_tensor().detach()))
            .collect()
    }

    fn describe(&self) -> String {
        let c = &self.config;
        format!(
            "toy-generator(L={}, D={}, {}x{}, seed={})",
            c.layers, c.dim, c.height, c.width, c.seed
        )
    }
}

/// Convenience constructor with the default gains.
pub fn toy_generator(layers: usize, dim: usize, height: usize, width: usize, seed: u64) -> Result<ToyGenerator> {
    ToyGenerator::new(ToyGeneratorConfig {
        layers,
        dim,
        height,
        width,
        seed,
        ..ToyGeneratorConfig::default()
    })
}

/// Number of hand-crafted image statistics the toy encoder projects.
const STAT_DIM: usize = 7;
/// Constant statistic keeping the embedding of a flat mid-gray image nonzero.
const STAT_OFFSET: f64 = 0.05;
const SLEEVE_CONTRAST: f64 = 0.3;
/// Scale of the identity projection; features of a mid-gray head are zero.
const IDENTITY_GAIN: f64 = 0.5;
/// Per-coordinate spread of the sampling centre.
const CENTER_STD: f64 = 0.05;

/// Embeds images by `normalize(P · s(img))` where `s` holds the mean colour
/// (relative to mid-gray), the top-half minus bottom-half mean colour and a
/// constant. Prompts map to the same projection of canonical statistics, so
/// an image matching a prompt has cosine similarity 1 with it.
pub struct ToyJointEncoder {
    dim: usize,
    seed: u64,
    projection: Tensor,
}

impl ToyJointEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 3 {
            return Err(Error::Config(format!("toy encoder needs E >= 3, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6970);
        let p = gaussian(&mut rng, dim * STAT_DIM, 1.0 / (STAT_DIM as f64).sqrt());
        Ok(ToyJointEncoder {
            dim,
            seed,
            projection: Tensor::from_vec(p, (dim, STAT_DIM), &cpu())?,
        })
    }

    /// The statistics vector for a prompt, or `None` if it is not in the vocabulary.
    pub fn prompt_statistics(prompt: &str) -> Option<[f64; STAT_DIM]> {
        let key = prompt.trim().trim_end_matches('.').trim().to_lowercase();
        let solid = |rgb: [f64; 3]| {
            Some([rgb[0] - 0.5, rgb[1] - 0.5, rgb[2] - 0.5, 0.0, 0.0, 0.0, STAT_OFFSET])
        };
        let contrast = |s: f64| Some([0.0, 0.0, 0.0, s, s, s, STAT_OFFSET]);
        match key.as_str() {
            "blue" => solid([0.0, 0.0, 1.0]),
            "green" => solid([0.0, 1.0, 0.0]),
            "red" => solid([1.0, 0.0, 0.0]),
            "yellow" => solid([1.0, 1.0, 0.0]),
            "white" => solid([1.0, 1.0, 1.0]),
            "black" => solid([0.0, 0.0, 0.0]),
            "gray" | "grey" => solid([0.5, 0.5, 0.5]),
            "a long sleeve" | "long sleeve" | "long sleeves" => contrast(-SLEEVE_CONTRAST),
            "a short sleeve" | "short sleeve" | "short sleeves" | "sleeveless" => {
                contrast(SLEEVE_CONTRAST)
            }
            _ => None,
        }
    }

    pub fn vocabulary() -> &'static [&'static str] {
        &[
            "blue",
            "green",
            "red",
            "yellow",
            "white",
            "black",
            "gray",
            "a long sleeve",
            "a short sleeve",
            "sleeveless",
        ]
    }

    fn statistics(image: &ImageBuffer) -> Result<Tensor> {
        let unit = image.unit_tensor()?;
        let h = image.height();
        let top = h / 2;
        let mean = unit.mean((0, 1))?.affine(1.0, -0.5)?;
        let upper = if top == 0 {
            unit.mean((0, 1))?
        } else {
            unit.narrow(0, 0, top)?.mean((0, 1))?
        };
        let lower = unit.narrow(0, top, h - top)?.mean((0, 1))?;
        let offset = Tensor::new(&[STAT_OFFSET], &cpu())?;
        Ok(Tensor::cat(&[&mean, &(upper - lower)?, &offset], 0)?)
    }

    fn project(&self, stats: &Tensor) -> Result<Tensor> {
        let e = self.projection.matmul(&stats.unsqueeze(1)?)?.squeeze(1)?;
        let norm = e.sqr()?.sum_all()?.sqrt()?;
        if norm.to_scalar::<f64>()? == 0.0 {
            return Err(Error::ZeroNorm("toy image embedding"));
        }
        Ok(e.broadcast_div(&norm)?)
    }
}

impl JointEncoder for ToyJointEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        let stats = Self::prompt_statistics(prompt).ok_or_else(|| Error::UnknownToken(prompt.to_string()))?;
        self.project(&Tensor::new(&stats, &cpu())?)
    }

    fn encode_image(&self, image: &ImageBuffer) -> Result<Tensor> {
        self.project(&Self::statistics(image)?)
    }

    fn describe(&self) -> String {
        format!("toy-joint-encoder(E={}, seed={})", self.dim, self.seed)
    }
}

pub fn toy_joint_encoder(dim: usize, seed: u64) -> Result<ToyJointEncoder> {
    ToyJointEncoder::new(dim, seed)
}

/// How [`ToyParser`] decides what is foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Everything inside the rectangle.
    Rect(Rect),
    /// Rec. 709 luma (on `[0, 1]` values) strictly above the threshold.
    Luminance(f64),
}

pub struct ToyParser {
    rule: ThresholdRule,
}

impl ToyParser {
    pub fn new(rule: ThresholdRule) -> Self {
        ToyParser { rule }
    }

    pub fn rule(&self) -> ThresholdRule {
        self.rule
    }
}

impl Parser for ToyParser {
    fn parse(&self, image: &ImageBuffer) -> Result<RegionMask> {
        let (h, w) = (image.height(), image.width());
        match self.rule {
            ThresholdRule::Rect(r) => RegionMask::rect(h, w, r),
            ThresholdRule::Luminance(t) => {
                let px = image.to_unit()?.to_vec()?;
                let data = px
                    .chunks_exact(3)
                    .map(|p| {
                        let y = 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2];
                        if y > t {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                RegionMask::from_vec(h, w, data)
            }
        }
    }

    fn describe(&self) -> String {
        match self.rule {
            ThresholdRule::Rect(r) => format!(
                "toy-parser(rect {}..{} x {}..{})",
                r.top, r.bottom, r.left, r.right
            ),
            ThresholdRule::Luminance(t) => format!("toy-parser(luma > {t})"),
        }
    }
}

pub fn toy_parser(rule: ThresholdRule) -> ToyParser {
    ToyParser::new(rule)
}

/// `tanh(P · pool2x2(crop))` over a fixed region of the image.
pub struct ToyIdentity {
    region: Rect,
    projection: Tensor,
    seed: u64,
}

impl ToyIdentity {
    pub fn new(region: Rect, feature_dim: usize, seed: u64) -> Result<Self> {
        let ph = (region.bottom - region.top) / 2;
        let pw = (region.right - region.left) / 2;
        if ph == 0 || pw == 0 || feature_dim == 0 {
            return Err(Error::Config(format!(
                "identity region {region:?} too small to pool"
            )));
        }
        let inputs = ph * pw * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6964_656e);
        let p = gaussian(&mut rng, feature_dim * inputs, IDENTITY_GAIN / (inputs as f64).sqrt());
        Ok(ToyIdentity {
            region,
            projection: Tensor::from_vec(p, (feature_dim, inputs), &cpu())?,
            seed,
        })
    }
}

/// 2x2 average pooling of an `(H, W, C)` tensor; odd trailing rows/cols dropped.
fn pool2(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.dims3()?;
    let (ph, pw) = (h / 2, w / 2);
    let t = t.narrow(0, 0, ph * 2)?.narrow(1, 0, pw * 2)?;
    Ok(t.reshape((ph, 2, pw, 2, c))?.mean(3)?.mean(1)?)
}

impl IdentityFeatures for ToyIdentity {
    fn feature_dim(&self) -> usize {
        self.projection.dims()[0]
    }

    fn features(&self, image: &ImageBuffer) -> Result<Tensor> {
        let r = self.region;
        if r.bottom > image.height() || r.right > image.width() {
            return Err(Error::Shape(format!(
                "identity region {r:?} outside {}x{} image",
                image.height(),
                image.width()
            )));
        }
        let crop = image
            .tensor()
            .narrow(0, r.top, r.bottom - r.top)?
            .narrow(1, r.left, r.right - r.left)?;
        let pooled = pool2(&crop)?.flatten_all()?.unsqueeze(1)?;
        Ok(self.projection.matmul(&pooled)?.squeeze(1)?.tanh()?)
    }

    fn describe(&self) -> String {
        format!(
            "toy-identity(F={}, seed={})",
            self.feature_dim(),
            self.seed
        )
    }
}

/// Mean squared difference of 2x2-pooled images plus of their horizontal and
/// vertical finite differences.
pub struct ToyPerceptual;

impl ToyPerceptual {
    fn gradients(t: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, w, _) = t.dims3()?;
        let dy = (t.narrow(0, 1, h - 1)? - t.narrow(0, 0, h - 1)?)?;
        let dx = (t.narrow(1, 1, w - 1)? - t.narrow(1, 0, w - 1)?)?;
        Ok((dy, dx))
    }
}

impl PerceptualDistance for ToyPerceptual {
    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<Tensor> {
        a.same_shape(b)?;
        if a.height() < 2 || a.width() < 2 {
            return Err(Error::Shape("perceptual distance needs at least 2x2 images".into()));
        }
        let (ta, tb) = (a.tensor(), b.tensor());
        let pooled = (pool2(ta)? - pool2(tb)?)?.sqr()?.mean_all()?;
        let (dya, dxa) = Self::gradients(ta)?;
        let (dyb, dxb) = Self::gradients(tb)?;
        let gy = (dya - dyb)?.sqr()?.mean_all()?;
        let gx = (dxa - dxb)?.sqr()?.mean_all()?;
        Ok(((pooled + gy)? + gx)?)
    }

    fn describe(&self) -> String {
        "toy-perceptual".into()
    }
}

/// A complete, mutually consistent toy model stack.
pub struct ToyStack {
    pub generator: ToyGenerator,
    pub encoder: ToyJointEncoder,
    pub parser: ToyParser,
    pub identity: ToyIdentity,
    pub perceptual: ToyPerceptual,
}

/// Sizes of a [`ToyStack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyStackConfig {
    pub generator: ToyGeneratorConfig,
    pub embed_dim: usize,
    pub identity_dim: usize,
}

impl Default for ToyStackConfig {
    fn default() -> Self {
        ToyStackConfig {
            generator: ToyGeneratorConfig::default(),
            embed_dim: 16,
            identity_dim: 16,
        }
    }
}

impl ToyStack {
    pub fn new(seed: u64) -> Result<Self> {
        let mut cfg = ToyStackConfig::default();
        cfg.generator.seed = seed;
        Self::with_config(cfg)
    }

    pub fn with_config(cfg: ToyStackConfig) -> Result<Self> {
        let generator = ToyGenerator::new(cfg.generator)?;
        Self::around(generator, cfg.embed_dim, cfg.identity_dim)
    }

    /// Builds encoder, parser and identity trunk consistent with `generator`'s layout.
    pub fn around(generator: ToyGenerator, embed_dim: usize, identity_dim: usize) -> Result<Self> {
        let seed = generator.config().seed;
        let layout = *generator.layout();
        Ok(ToyStack {
            encoder: ToyJointEncoder::new(embed_dim, seed)?,
            parser: ToyParser::new(ThresholdRule::Rect(layout.garment)),
            identity: ToyIdentity::new(layout.head, identity_dim, seed)?,
            perceptual: ToyPerceptual,
            generator,
        })
    }

    pub fn layout(&self) -> ToyLayout {
        *self.generator.layout()
    }

    pub fn backends(&self) -> Backends<'_> {
        Backends {
            generator: &self.generator,
            encoder: &self.encoder,
            parser: &self.parser,
            identity: &self.identity,
        }
    }

    /// The mean of [`ToyStack::sample_codes`]: one random vector repeated on
    /// every layer, deterministic in the generator seed.
    pub fn latent_center(&self) -> Result<LatentCode> {
        let (l, d) = (self.generator.num_layers(), self.generator.latent_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(self.generator.config().seed ^ 0x6365_6e74);
        let row = gaussian(&mut rng, d, CENTER_STD);
        let values = (0..l).flat_map(|_| row.iter().copied()).collect();
        LatentCode::from_vec(l, d, values, LatentSpace::WPlus)
    }

    /// `count` codes `center + N(0, std²)`, deterministic in `seed`.
    pub fn sample_codes(&self, count: usize, std: f64, seed: u64) -> Result<Vec<LatentCode>> {
        let center = self.latent_center()?.to_vec()?;
        let (l, d) = (self.generator.num_layers(), self.generator.latent_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let noise = gaussian(&mut rng, l * d, std);
                let values = center.iter().zip(noise).map(|(c, n)| c + n).collect();
                LatentCode::from_vec(l, d, values, LatentSpace::WPlus)
            })
            .collect()
    }
}

/// Mean of each colour channel over the pixels where `mask` is set, on `[0, 1]` values.
pub fn masked_channel_means(image: &ImageBuffer, mask: &RegionMask) -> Result<[f64; 3]> {
    let px = image.to_unit()?.to_vec()?;
    let m = mask.to_vec()?;
    let mut sums = [0.0; 3];
    let total: f64 = m.iter().sum();
    if total == 0.0 {
        return Err(Error::EmptyRegion("channel means".into()));
    }
    for (p, w) in px.chunks_exact(3).zip(&m) {
        for ch in 0..3 {
            sums[ch] += p[ch] * w;
        }
    }
    Ok(sums.map(|s| s / total))
}
