//! The acceptance gate: one line per criterion, PASS or FAIL.
//!
//! Run with `cargo test -p garment-edit --test acceptance -- --nocapture` to
//! see the report.

mod support;

use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use garment_edit::backends::toy::{masked_channel_means, ToyPerceptual, ToyStack};
use garment_edit::backends::{Generator, Parser};
use garment_edit::colorspace::lab_from_unit_rgb;
use garment_edit::inversion::{pti_tune, PtiConfig, StopReason};
use garment_edit::latent_opt::{optimize_latent, LatentOptConfig};
use garment_edit::losses::{background_loss, clip_loss, color_loss, id_loss, mse, norm_loss, pti_loss, EditTerms};
use garment_edit::mapper::modulation::{modulate, ModulationParams, MODULATION_EPS};
use garment_edit::metrics::{evaluate_folder, fid, EvalOptions, ImagePair, DEFAULT_PSNR_CAP};
use garment_edit::training::{mapper_loss, mean_clip_term, mean_term, split_dataset, train_mapper};
use garment_edit::{
    EditConfig, ImageBuffer, LatentCode, LatentSpace, LossWeights, Mapper, MapperKind, MapperShape, ModulatedMapper,
    OptimizerKind, PixelRange, PlainMapper, Region, TextCondition,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Criteria that cannot be met as written; they still print FAIL.
const KNOWN_UNATTAINABLE: &[(u8, &str)] = &[(
    6,
    "the colour-row target 1.81 does not follow from weights (1, 1, 1, 5e-3, 1) on the stated terms, which sum to 1.11",
)];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn shape16() -> MapperShape {
    MapperShape {
        partition: Default::default(),
        latent_dim: 16,
        embed_dim: 16,
    }
}

fn loss_identities() -> Verdict {
    let stack = ToyStack::new(0).unwrap();
    let codes = stack.sample_codes(3, 0.3, 1).unwrap();
    let mut worst: f64 = 0.0;
    for w in &codes {
        let img = stack.generator.synthesize(w).unwrap();
        let e = garment_edit::backends::JointEncoder::encode_image(&stack.encoder, &img).unwrap();
        let terms = [
            clip_loss(&e, &e).unwrap(),
            id_loss(&img, &img, &stack.identity).unwrap(),
            color_loss(&img, &img, &stack.parser).unwrap(),
            background_loss(&img, &img, &stack.parser).unwrap(),
            norm_loss(&LatentCode::zeros(18, 16, LatentSpace::WPlus).unwrap()).unwrap(),
            pti_loss(&img, &img, &ToyPerceptual, 1.0).unwrap(),
        ];
        for t in &terms {
            worst = worst.max(scalar(t).abs());
        }
    }
    verdict(worst <= 1e-9, format!("max |term| = {worst:.2e}"))
}

fn gradients() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let mut probes = usize::MAX;
    for (i, case) in support::gradient_cases().iter().enumerate() {
        let s = support::probe(case, 100 + i as u64);
        worst = worst.max(s.max_relative_error);
        probes = probes.min(s.probes);
        parts.push(format!("{} {:.1e}", case.name, s.max_relative_error));
    }
    verdict(
        worst < support::MAX_RELATIVE_ERROR && probes >= 10,
        format!("{probes} probes each; {}", parts.join(", ")),
    )
}

/// Textbook sRGB → CIELAB for one colour, D65 white (0.95047, 1, 1.08883).
fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab(rgb: [f64; 3]) -> [f64; 3] {
    let v: Vec<f64> = lab_from_unit_rgb(&Tensor::new(&rgb, &Device::Cpu).unwrap())
        .unwrap()
        .to_vec1()
        .unwrap();
    [v[0], v[1], v[2]]
}

fn colorspace() -> Verdict {
    let white = lab([1.0; 3]);
    let black = lab([0.0; 3]);
    let endpoints = (white[0] - 100.0).abs().max(white[1].abs()).max(white[2].abs())
        .max(black.iter().map(|v| v.abs()).fold(0.0, f64::max));
    let red = lab([1.0, 0.0, 0.0]);
    let oracle = lab_oracle([1.0, 0.0, 0.0]);
    let reference = [53.24, 80.09, 67.20];
    let red_err = (0..3)
        .map(|i| (red[i] - oracle[i]).abs().max((red[i] - reference[i]).abs()))
        .fold(0.0, f64::max);
    let grays: Vec<f64> = (0..100).map(|i| lab([i as f64 / 99.0; 3])[0]).collect();
    let monotone = grays.windows(2).all(|p| p[1] > p[0]);
    verdict(
        endpoints <= 1e-6 && red_err <= 0.05 && monotone,
        format!(
            "endpoints {endpoints:.1e}; red ({:.2}, {:.2}, {:.2}) err {red_err:.3}; gray monotone {monotone}",
            red[0], red[1], red[2]
        ),
    )
}

fn modulation() -> Verdict {
    let (n, d, e_dim) = (8, 16, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut randn = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let y_vals = randn(n * d);
    let e_vals = randn(e_dim);
    let y = Tensor::from_vec(y_vals.clone(), (n, d), &Device::Cpu).unwrap();
    let e = Tensor::new(e_vals.as_slice(), &Device::Cpu).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(5);

    let zero = ModulationParams::zeroed(e_dim, d, &mut prng).unwrap();
    let ones: Vec<f64> = modulate(&y, &e, &zero, MODULATION_EPS).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let all_ones = ones.iter().all(|&v| v == 1.0);

    let params = ModulationParams::new(e_dim, d, &mut prng).unwrap();
    let gamma: Vec<f64> = params.gamma.forward(&e).unwrap().to_vec1().unwrap();
    let beta: Vec<f64> = params.beta.forward(&e).unwrap().to_vec1().unwrap();

    let constant = Tensor::from_vec(vec![0.7; n * d], (n, d), &Device::Cpu).unwrap();
    let c_out: Vec<f64> = modulate(&constant, &e, &params, MODULATION_EPS).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let c_err = c_out.iter().enumerate().map(|(i, v)| (v - (1.0 + beta[i % d])).abs()).fold(0.0, f64::max);

    let out: Vec<f64> = modulate(&y, &e, &params, MODULATION_EPS).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let mut err: f64 = 0.0;
    for r in 0..n {
        let row = &y_vals[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let sigma = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64).sqrt();
        for j in 0..d {
            let expect = 1.0 + gamma[j] * (row[j] - mu) / (sigma + MODULATION_EPS) + beta[j];
            err = err.max((out[r * d + j] - expect).abs());
        }
    }
    verdict(
        all_ones && c_err <= 1e-6 && err <= 1e-6,
        format!("zero nets all ones {all_ones}; constant rows err {c_err:.1e}; oracle err {err:.1e}"),
    )
}

fn rows(code: &LatentCode, range: std::ops::Range<usize>) -> Vec<f64> {
    let d = code.dim();
    code.to_vec().unwrap()[range.start * d..range.end * d].to_vec()
}

fn mapper_locality() -> Verdict {
    let stack = ToyStack::new(0).unwrap();
    let part = shape16().partition;
    let w = &stack.sample_codes(1, 0.3, 9).unwrap()[0];
    let enc = &stack.encoder;
    let blue = TextCondition::encode("a long sleeve", Some("blue"), enc).unwrap();
    let red = TextCondition::encode("a long sleeve", Some("red"), enc).unwrap();

    let m = ModulatedMapper::with_random_head(shape16(), true, 3).unwrap();
    let (rb, rr) = (m.residual(w, &blue).unwrap(), m.residual(w, &red).unwrap());
    let upper_same = rows(&rb, 0..part.medium_end()) == rows(&rr, 0..part.medium_end());
    let fine_moves = rows(&rb, part.fine()) != rows(&rr, part.fine());

    let zero_mod = ModulatedMapper::new(shape16(), true, 3).unwrap().residual(w, &blue).unwrap();
    let zero_plain = PlainMapper::new(shape16(), 3).unwrap().residual(w, &blue).unwrap();
    let zero_init = zero_mod.to_vec().unwrap().iter().chain(&zero_plain.to_vec().unwrap()).all(|&v| v == 0.0);

    let no_inject = ModulatedMapper::with_random_head(shape16(), false, 3).unwrap();
    let other = TextCondition::encode("a short sleeve", Some("red"), enc).unwrap();
    let fine_blind = rows(&no_inject.residual(w, &blue).unwrap(), part.fine())
        == rows(&no_inject.residual(w, &other).unwrap(), part.fine());

    let mut cfg = EditConfig::default();
    cfg.weights = LossWeights::color();
    cfg.use_id_loss = false;
    let report = mapper_loss(MapperKind::Modulated, w, &rb, &blue, &cfg, stack.backends()).unwrap().report;
    let wts = cfg.weights;
    let without_id = report.term("clip") * wts.clip + report.term("norm") * wts.l2
        + report.term("color") * wts.color
        + report.term("bg") * wts.bg;
    let id_silent = report.term("id") > 0.0 && (report.total - without_id).abs() <= 1e-12;

    verdict(
        upper_same && fine_moves && zero_init && fine_blind && id_silent,
        format!(
            "colour-only change keeps coarse+medium {upper_same}; zero heads give 0 {zero_init}; \
             fine injection off ignores prompts {fine_blind}; id toggle removes id {id_silent}"
        ),
    )
}

fn weighting() -> Verdict {
    let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
    let terms = || EditTerms {
        clip: t(0.5),
        norm: t(0.2),
        id: t(0.1),
        color: Some(t(2.0)),
        bg: Some(t(0.3)),
    };
    let sleeve = terms().assemble(&LossWeights::sleeve()).unwrap().report.total;
    let color = terms().assemble(&LossWeights::color()).unwrap().report.total;
    verdict(
        (sleeve - 0.90).abs() <= 1e-9 && (color - 1.81).abs() <= 1e-9,
        format!("sleeve row {sleeve:.9} (target 0.90); colour row {color:.9} (target 1.81)"),
    )
}

fn latent_optimizer() -> Verdict {
    let stack = ToyStack::new(0).unwrap();
    let w = LatentCode::zeros(18, 16, LatentSpace::WPlus).unwrap();
    let cfg = LatentOptConfig::default();
    let run = || optimize_latent(&w, "blue", stack.backends(), &cfg).unwrap();
    let a = run();
    let b = run();
    let clip = a.history[a.best_step].term("clip");
    let g = &stack.generator;
    let (orig, edited) = (g.synthesize(&w).unwrap(), g.synthesize(&a.edited).unwrap());
    let blue_before = masked_channel_means(&orig.to_unit().unwrap(), &stack.parser.parse(&orig).unwrap()).unwrap()[2];
    let blue_after = masked_channel_means(&edited.to_unit().unwrap(), &stack.parser.parse(&edited).unwrap()).unwrap()[2];
    let same = a.edited.to_vec().unwrap() == b.edited.to_vec().unwrap();
    verdict(
        clip < 0.05 && blue_after > blue_before && same && cfg.max_steps <= 200,
        format!(
            "clip {clip:.4} at step {}; foreground blue {blue_before:.3} -> {blue_after:.3}; identical reruns {same}",
            a.best_step
        ),
    )
}

fn mapper_training() -> Verdict {
    let seed = 0;
    let stack = ToyStack::new(seed).unwrap();
    let codes = stack.sample_codes(20, 0.015, seed + 100).unwrap();
    let items = codes.into_iter().enumerate().map(|(i, c)| (format!("{i:02}"), c)).collect();
    let dataset = split_dataset(items, 0.8, seed).unwrap();
    let test: Vec<LatentCode> = dataset.test().map(|(_, c)| c.clone()).collect();
    let cond = TextCondition::encode("blue", None, &stack.encoder).unwrap();
    let config = |bg: f64| {
        let mut c = EditConfig::default();
        c.seed = seed;
        c.learning_rate = 2e-3;
        c.max_steps = 300;
        c.optimizer = OptimizerKind::Ranger;
        c.weights = LossWeights::color();
        c.weights.bg = bg;
        c
    };
    let eval = config(LossWeights::color().bg);
    let b = stack.backends();
    let untrained = ModulatedMapper::new(shape16(), true, seed).unwrap();
    let clip_before = mean_clip_term(&untrained, &test, &cond, &eval, b).unwrap();

    let trained = ModulatedMapper::new(shape16(), true, seed).unwrap();
    train_mapper(&trained, &dataset, &cond, &config(eval.weights.bg), b, None).unwrap();
    let clip_after = mean_clip_term(&trained, &test, &cond, &eval, b).unwrap();
    let bg = mean_term(&trained, &test, &cond, &eval, b, "bg").unwrap();

    let control = ModulatedMapper::new(shape16(), true, seed).unwrap();
    train_mapper(&control, &dataset, &cond, &config(0.0), b, None).unwrap();
    let bg_control = mean_term(&control, &test, &cond, &eval, b, "bg").unwrap();

    let clip_ratio = clip_after / clip_before;
    let bg_ratio = bg / bg_control;
    verdict(
        clip_ratio <= 0.5 && bg_ratio < 0.05,
        format!(
            "held-out clip {clip_before:.3} -> {clip_after:.3} (ratio {clip_ratio:.2}); \
             bg {bg:.4} vs control {bg_control:.3} (ratio {bg_ratio:.3})"
        ),
    )
}

fn inversion() -> Verdict {
    let stack = ToyStack::new(0).unwrap();
    let g = &stack.generator;
    let codes = stack.sample_codes(2, 0.3, 11).unwrap();
    let (pivot, other) = (&codes[0], &codes[1]);
    let base = g.synthesize(pivot).unwrap();
    let away = g.synthesize(other).unwrap();
    let mixed = ((base.tensor() * 0.8).unwrap() + (away.tensor() * 0.2).unwrap()).unwrap();
    let target = ImageBuffer::new(mixed, PixelRange::SignedUnit).unwrap();

    let cfg = PtiConfig {
        max_steps: 500,
        tolerance: 0.0,
        ..PtiConfig::default()
    };
    let res = pti_tune(&target, pivot, g, &ToyPerceptual, &cfg).unwrap();
    let before = scalar(&mse(&target, &base).unwrap());
    let after = scalar(&mse(&target, &res.tuned_generator.synthesize(pivot).unwrap()).unwrap());
    let ratio = after / before;

    let perfect = pti_tune(&base, pivot, g, &ToyPerceptual, &PtiConfig::default()).unwrap();
    let stops = perfect.stop == StopReason::Converged && perfect.steps_used <= 1;

    let untouched = pti_tune(&target, pivot, g, &ToyPerceptual, &PtiConfig { max_steps: 0, ..cfg }).unwrap();
    let same = untouched
        .tuned_generator
        .state()
        .iter()
        .zip(g.state())
        .all(|((_, a), (_, b))| {
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap() == b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        });
    verdict(
        ratio <= 0.10 && res.steps_used <= 500 && stops && same,
        format!(
            "pixel MSE {before:.2e} -> {after:.2e} (ratio {ratio:.3}) in {} steps; \
             perfect pivot stops after {} step(s) {stops}; zero steps bit-identical {same}",
            res.steps_used, perfect.steps_used
        ),
    )
}

fn metric_suite() -> Verdict {
    let stack = ToyStack::new(0).unwrap();
    let codes = stack.sample_codes(4, 0.3, 21).unwrap();
    let images: Vec<ImageBuffer> = codes.iter().map(|c| stack.generator.synthesize(c).unwrap()).collect();
    let same: Vec<ImagePair> = images
        .iter()
        .enumerate()
        .map(|(i, im)| ImagePair {
            id: i.to_string(),
            orig: im.clone(),
            edited: im.clone(),
        })
        .collect();
    let opts = EvalOptions::default();
    let id_report = evaluate_folder(&same, &stack.parser, Region::Full, &stack.identity, &opts).unwrap();
    let identity_ok = (id_report.ssim - 1.0).abs() <= 1e-9
        && id_report.psnr == DEFAULT_PSNR_CAP
        && id_report.acd == 0.0
        && id_report.fid.unwrap() <= 1e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (5000, 4);
    let shift = [1.5, -1.0, 2.0, 0.5];
    let closed_form: f64 = shift.iter().map(|s| s * s).sum();
    let mut draw = |offset: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|j| offset[j] + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
            .collect()
    };
    let a = draw(&[0.0; 4]);
    let b = draw(&shift);
    let f = fid(&a, &b).unwrap();
    let fid_err = (f - closed_form).abs() / closed_form;

    let pairs: Vec<ImagePair> = (0..4)
        .map(|i| ImagePair {
            id: i.to_string(),
            orig: images[i].clone(),
            edited: images[(i + 1) % 4].clone(),
        })
        .collect();
    let report = evaluate_folder(&pairs, &stack.parser, Region::Foreground, &stack.identity, &opts).unwrap();
    let mean = |f: fn(&garment_edit::metrics::PairMetrics) -> f64| report.pairs.iter().map(f).sum::<f64>() / 4.0;
    let agg_err = (report.ssim - mean(|p| p.ssim))
        .abs()
        .max((report.psnr - mean(|p| p.psnr)).abs())
        .max((report.acd - mean(|p| p.acd)).abs());
    verdict(
        identity_ok && fid_err <= 0.02 && agg_err <= 1e-9,
        format!(
            "identity ssim {:.3} psnr {} acd {} fid {:.1e}; gaussian FID {f:.3} vs {closed_form:.3} ({:.2}%); aggregation err {agg_err:.1e}",
            id_report.ssim,
            id_report.psnr,
            id_report.acd,
            id_report.fid.unwrap(),
            100.0 * fid_err
        ),
    )
}

fn cli(args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["garment-edit"];
    argv.extend_from_slice(args);
    garment_edit_cli::run(argv)
}

fn cli_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |s: &str| d.join(s).to_string_lossy().into_owned();
    let gen = format!("checkpoint:{}", p("inv/generator.safetensors"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("lat", vec!["sample-latents".into(), "--count".into(), "4".into(), "--out".into(), p("lat")]),
        ("opt", vec!["optimize".into(), "--latent".into(), p("lat/0000.bin"), "--text".into(), "blue".into(), "--steps".into(), "10".into(), "--out".into(), p("opt")]),
        ("tm", vec!["train-mapper".into(), "--dataset".into(), p("lat"), "--text".into(), "blue".into(), "--steps".into(), "8".into(), "--split".into(), "0.5".into(), "--out".into(), p("tm")]),
        ("ed", vec!["edit".into(), "--mapper".into(), p("tm/mapper.safetensors"), "--latent".into(), p("lat/0001.bin"), "--blend".into(), "--out".into(), p("ed")]),
        ("inv", vec!["invert".into(), "--image".into(), p("ed/edited.png"), "--steps".into(), "5".into(), "--encoder-steps".into(), "10".into(), "--out".into(), p("inv")]),
        ("ed2", vec!["--generator".into(), gen, "edit".into(), "--mapper".into(), p("tm/mapper.safetensors"), "--image".into(), p("ed/original.png"), "--encoder-steps".into(), "5".into(), "--pti-steps".into(), "2".into(), "--out".into(), p("ed2")]),
        ("ev", vec!["evaluate".into(), "--original".into(), p("ed"), "--edited".into(), p("ed2"), "--region".into(), "full".into(), "--out".into(), p("ev")]),
    ];
    let mut failures = Vec::new();
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if let Err(e) = cli(&args) {
            failures.push(format!("{name}: {e:#}"));
            continue;
        }
        let manifest = p(&format!("{name}/manifest.json"));
        let again = p(&format!("{name}-replay"));
        if let Err(e) = cli(&["replay", "--manifest", &manifest, "--out", &again]) {
            failures.push(format!("{name} replay: {e:#}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} commands on the toy stack replayed byte-identically", runs.len())
        } else {
            failures.join("; ")
        },
    )
}

#[test]
fn acceptance() {
    type Criterion = (u8, &'static str, Duration, fn() -> Verdict);
    let criteria: [Criterion; 11] = [
        (1, "loss identities", Duration::from_secs(10), loss_identities),
        (2, "gradients", Duration::from_secs(120), gradients),
        (3, "colorspace reference", Duration::from_secs(60), colorspace),
        (4, "modulation semantics", Duration::from_secs(60), modulation),
        (5, "mapper locality", Duration::from_secs(60), mapper_locality),
        (6, "loss weighting", Duration::from_secs(60), weighting),
        (7, "toy latent optimizer", Duration::from_secs(60), latent_optimizer),
        (8, "toy mapper training", Duration::from_secs(300), mapper_training),
        (9, "toy inversion", Duration::from_secs(300), inversion),
        (10, "metric suite", Duration::from_secs(300), metric_suite),
        (11, "cli determinism", Duration::from_secs(600), cli_determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= budget;
        let known = KNOWN_UNATTAINABLE.iter().find(|(k, _)| *k == id);
        println!(
            "criterion {id:>2} {:<4} {name:<22} {:>7.2}s  {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            v.detail
        );
        match (pass, known) {
            (false, Some((_, why))) => println!("             known: {why}"),
            (false, None) => unexpected.push(id),
            (true, Some(_)) => unexpected.push(id),
            (true, None) => {}
        }
    }
    assert!(unexpected.is_empty(), "criteria with an unexpected outcome: {unexpected:?}");
}
