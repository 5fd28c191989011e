//! Shared finite-difference machinery for the gradient and acceptance suites.

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use garment_edit::backends::toy::{ToyPerceptual, ToyStack};
use garment_edit::backends::Generator;
use garment_edit::losses::{background_loss, clip_loss, color_loss, id_loss, norm_loss, pti_loss};
use garment_edit::mapper::modulation::{modulate, ModulationParams, MODULATION_EPS};
use garment_edit::{ImageBuffer, LatentCode, LatentSpace, PixelRange};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const PROBES: usize = 12;
pub const FD_STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;

type Loss = Box<dyn Fn(&Tensor) -> garment_edit::Result<Tensor>>;

/// A scalar function of one tensor input, with a sampler for probe points.
pub struct GradientCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub low: f64,
    pub high: f64,
    pub loss: Loss,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeSummary {
    pub probes: usize,
    pub max_relative_error: f64,
}

fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Directional derivatives along random unit directions at random points,
/// autodiff against central differences.
pub fn probe(case: &GradientCase, seed: u64) -> ProbeSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = case.shape.iter().product();
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(case.low..case.high)).collect();
        let v = unit_direction(&mut rng, n);
        let var = Var::from_vec(x.clone(), case.shape.as_slice(), &Device::Cpu).unwrap();
        let loss = (case.loss)(var.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; n],
        };
        let analytic: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let at = |s: f64| {
            let p: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + s * vi).collect();
            value(&(case.loss)(&Tensor::from_vec(p, case.shape.as_slice(), &Device::Cpu).unwrap()).unwrap())
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    ProbeSummary {
        probes: PROBES,
        max_relative_error: worst,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, low: f64, high: f64, range: PixelRange) -> ImageBuffer {
    let v = (0..h * w * 3).map(|_| rng.random_range(low..high)).collect();
    ImageBuffer::from_vec(h, w, v, range).unwrap()
}

/// Every loss term and the modulation layer, each as a function of its
/// differentiable input.
pub fn gradient_cases() -> Vec<GradientCase> {
    let stack = std::sync::Arc::new(ToyStack::new(0).unwrap());
    let (h, w) = (stack.generator.height(), stack.generator.width());
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let text: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
    let text = Tensor::new(text.as_slice(), &Device::Cpu).unwrap();
    let signed_orig = random_image(&mut rng, h, w, -0.7, 0.7, PixelRange::SignedUnit);
    let unit_orig = ImageBuffer::solid(h, w, [0.8, 0.25, 0.2], PixelRange::Unit).unwrap();
    let features = 16;
    let embed = 12;
    let params = std::sync::Arc::new(ModulationParams::new(embed, features, &mut rng).unwrap());
    let fixed_rows: Vec<f64> = (0..8 * features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let fixed_rows = Tensor::from_vec(fixed_rows, (8, features), &Device::Cpu).unwrap();
    let fixed_embed: Vec<f64> = (0..embed).map(|_| StandardNormal.sample(&mut rng)).collect();
    let fixed_embed = Tensor::new(fixed_embed.as_slice(), &Device::Cpu).unwrap();
    // Weighted sum so the vector-valued layer becomes a scalar.
    let readout: Vec<f64> = (0..8 * features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let readout = Tensor::from_vec(readout, (8, features), &Device::Cpu).unwrap();

    let img = |range: PixelRange| move |t: &Tensor| ImageBuffer::new(t.clone(), range);
    let signed = img(PixelRange::SignedUnit);
    let unit = img(PixelRange::Unit);

    let s1 = stack.clone();
    let o1 = signed_orig.clone();
    let s2 = stack.clone();
    let o2 = signed_orig.clone();
    let s3 = stack.clone();
    let p1 = params.clone();
    let r1 = readout.clone();
    let p2 = params;
    let r2 = readout;
    let target = signed_orig;
    vec![
        GradientCase {
            name: "clip",
            shape: vec![16],
            low: -1.0,
            high: 1.0,
            loss: Box::new(move |x| clip_loss(x, &text)),
        },
        GradientCase {
            name: "identity",
            shape: vec![h, w, 3],
            low: -0.8,
            high: 0.8,
            loss: Box::new(move |x| id_loss(&o1, &signed(x)?, &s1.identity)),
        },
        GradientCase {
            name: "norm",
            shape: vec![18, 16],
            low: -1.0,
            high: 1.0,
            loss: Box::new(|x| norm_loss(&LatentCode::new(x.clone(), LatentSpace::WPlus)?)),
        },
        GradientCase {
            name: "color",
            shape: vec![h, w, 3],
            low: 0.2,
            high: 0.9,
            loss: Box::new(move |x| color_loss(&unit_orig, &unit(x)?, &s2.parser)),
        },
        GradientCase {
            name: "background",
            shape: vec![h, w, 3],
            low: -0.8,
            high: 0.8,
            loss: Box::new(move |x| background_loss(&o2, &signed(x)?, &s3.parser)),
        },
        GradientCase {
            name: "inversion",
            shape: vec![h, w, 3],
            low: -0.8,
            high: 0.8,
            loss: Box::new(move |x| pti_loss(&target, &signed(x)?, &ToyPerceptual, 1.0)),
        },
        GradientCase {
            name: "modulation/features",
            shape: vec![8, features],
            low: -2.0,
            high: 2.0,
            loss: Box::new(move |x| {
                Ok((modulate(x, &fixed_embed, &p1, MODULATION_EPS)? * &r1)?.sum_all()?)
            }),
        },
        GradientCase {
            name: "modulation/embedding",
            shape: vec![embed],
            low: -2.0,
            high: 2.0,
            loss: Box::new(move |x| {
                Ok((modulate(&fixed_rows, x, &p2, MODULATION_EPS)? * &r2)?.sum_all()?)
            }),
        },
    ]
}
