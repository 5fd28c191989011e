use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use garment_edit::backends::toy::{ToyGenerator, ToyStack, ToyStackConfig};
use garment_edit::backends::{Generator, IdentityFeatures, JointEncoder, Parser, PerceptualDistance};
use garment_edit::inversion::{encode_pivot, pti_tune, OptimizingEncoder, PtiConfig};
use garment_edit::io::{load_mapper, load_toy_generator, read_latent, read_latent_dir, save_mapper, save_toy_generator, write_latent};
use garment_edit::latent_opt::{optimize_latent, LatentOptConfig};
use garment_edit::metrics::{evaluate_folder, EvalOptions, ImagePair};
use garment_edit::training::{
    apply_edit, blend_preserved_regions, mean_clip_term, mean_term, split_dataset, train_mapper, write_log_csv,
    CheckpointPolicy,
};
use garment_edit::{
    mask_background, EditConfig, LatentCode, LossReport, LossWeights, Mapper, MapperShape, ModulatedMapper, PlainMapper,
    TextCondition,
};
use serde_json::{json, Value};

use crate::manifest::{digest_inputs, Manifest, MANIFEST_FILE};
use crate::pngio::{read_png, write_png};
use crate::{Cli, Command, EditArgs, EvaluateArgs, GeneratorSpec, InvertArgs, MapperChoice, OptimizeArgs, SampleArgs, TrainArgs};

/// What a command reports back for the manifest.
struct Outcome {
    settings: Value,
}

struct Ctx<'a> {
    cli: &'a Cli,
    stack: ToyStack,
    seed: u64,
}

impl Ctx<'_> {
    fn backend_descriptions(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("generator".to_string(), self.stack.generator.describe()),
            ("text_image_encoder".to_string(), self.stack.encoder.describe()),
            ("parser".to_string(), self.stack.parser.describe()),
            ("identity".to_string(), self.stack.identity.describe()),
            ("perceptual".to_string(), self.stack.perceptual.describe()),
        ])
    }
}

fn build_stack(spec: &GeneratorSpec, seed: u64) -> anyhow::Result<ToyStack> {
    Ok(match spec {
        GeneratorSpec::Toy => ToyStack::new(seed)?,
        GeneratorSpec::Checkpoint(p) => {
            let g = load_toy_generator(p).with_context(|| format!("loading generator {}", p.display()))?;
            let d = ToyStackConfig::default();
            ToyStack::around(g, d.embed_dim, d.identity_dim)?
        }
    })
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::SampleLatents(a) => &a.out,
        Command::Invert(a) => &a.out,
        Command::Optimize(a) => &a.out,
        Command::TrainMapper(a) => &a.out,
        Command::Edit(a) => &a.out,
        Command::Evaluate(a) => &a.out,
        Command::Replay(a) => &a.out,
    }
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            bail!("{} exists and is not a directory", dir.display());
        }
        if std::fs::read_dir(dir)?.next().is_some() {
            bail!("output directory {} is not empty", dir.display());
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Validates, runs the command into its output folder and writes the manifest.
/// Under `--dry-run` only the plan is printed.
pub(crate) fn run_recorded(cli: &Cli, argv: Vec<String>) -> anyhow::Result<()> {
    for input in cli.inputs() {
        if !input.exists() {
            bail!("input {} does not exist", input.display());
        }
    }
    let seed = cli.seed();
    let ctx = Ctx { cli, stack: build_stack(&cli.generator, seed)?, seed };
    let out = out_dir(&cli.command).to_path_buf();
    if cli.dry_run {
        let plan = plan(&ctx)?;
        let summary = json!({
            "command": cli.command.name(),
            "out": out,
            "seed": seed,
            "generator": cli.generator.to_string(),
            "settings": plan,
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    prepare_out(&out)?;
    let outcome = match &cli.command {
        Command::SampleLatents(a) => sample_latents(&ctx, a),
        Command::Invert(a) => invert(&ctx, a),
        Command::Optimize(a) => optimize(&ctx, a),
        Command::TrainMapper(a) => train(&ctx, a),
        Command::Edit(a) => edit(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Replay(_) => bail!("replay is not a recorded command"),
    }?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        argv,
        cwd: std::env::current_dir()?,
        seed,
        generator: cli.generator.to_string(),
        backends: ctx.backend_descriptions(),
        settings: outcome.settings,
        inputs: digest_inputs(&cli.inputs())?,
        outputs: Manifest::digest_outputs(&out)?,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    println!("{} finished: {} files in {}", cli.command.name(), manifest.outputs.len(), out.display());
    Ok(())
}

/// Resolved settings for a dry run, after the same validation a real run does.
fn plan(ctx: &Ctx) -> anyhow::Result<Value> {
    Ok(match &ctx.cli.command {
        Command::SampleLatents(a) => sample_settings(a)?,
        Command::Invert(a) => {
            check_image(ctx, &read_png(&a.image)?)?;
            invert_settings(a, ctx.seed)?.0
        }
        Command::Optimize(a) => {
            load_code(ctx, &a.latent)?;
            optimize_settings(a)?.0
        }
        Command::TrainMapper(a) => {
            let cfg = train_config(ctx, a)?;
            let n = read_latent_dir(&a.dataset)?.len();
            json!({ "config": cfg, "dataset_size": n, "kind": kind_name(a.kind), "split": a.split })
        }
        Command::Edit(a) => {
            let ck = load_mapper(&a.mapper)?;
            ck.check_against(&ctx.stack.generator)?;
            edit_settings(a, &ck.shape_prompt, ck.color_prompt.as_deref())
        }
        Command::Evaluate(a) => {
            let pairs = collect_pairs(&a.original, &a.edited)?;
            json!({ "region": a.region, "psnr_cap": a.psnr_cap, "pairs": pairs.len() })
        }
        Command::Replay(_) => bail!("replay cannot be planned"),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn history_csv(path: &Path, history: &[LossReport]) -> anyhow::Result<()> {
    let names: Vec<&String> = history.first().map(|r| r.terms.keys().collect()).unwrap_or_default();
    let mut out = String::from("step");
    for n in &names {
        out.push(',');
        out.push_str(n);
    }
    out.push_str(",total\n");
    for (i, r) in history.iter().enumerate() {
        out.push_str(&i.to_string());
        for n in &names {
            out.push_str(&format!(",{:e}", r.term(n)));
        }
        out.push_str(&format!(",{:e}\n", r.total));
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn check_image(ctx: &Ctx, img: &garment_edit::ImageBuffer) -> anyhow::Result<()> {
    let g = &ctx.stack.generator;
    if img.height() != g.height() || img.width() != g.width() {
        bail!(
            "image is {}x{} but the generator renders {}x{}",
            img.height(),
            img.width(),
            g.height(),
            g.width()
        );
    }
    Ok(())
}

fn load_code(ctx: &Ctx, path: &Path) -> anyhow::Result<LatentCode> {
    let (code, _) = read_latent(path).with_context(|| format!("reading latent {}", path.display()))?;
    let g = &ctx.stack.generator;
    if code.layers() != g.num_layers() || code.dim() != g.latent_dim() {
        bail!(
            "latent {} is ({}, {}) but the generator expects ({}, {})",
            path.display(),
            code.layers(),
            code.dim(),
            g.num_layers(),
            g.latent_dim()
        );
    }
    Ok(code)
}

fn l2_norm(code: &LatentCode) -> anyhow::Result<f64> {
    Ok(code.to_vec()?.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn sample_settings(a: &SampleArgs) -> anyhow::Result<Value> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    if !(a.std >= 0.0 && a.std.is_finite()) {
        bail!("--std must be a finite non-negative number");
    }
    Ok(json!({ "count": a.count, "std": a.std }))
}

fn sample_latents(ctx: &Ctx, a: &SampleArgs) -> anyhow::Result<Outcome> {
    let settings = sample_settings(a)?;
    let codes = ctx.stack.sample_codes(a.count, a.std, ctx.seed)?;
    let width = a.count.to_string().len().max(4);
    for (i, code) in codes.iter().enumerate() {
        write_latent(&a.out.join(format!("{i:0width$}.bin")), code, ctx.seed)?;
    }
    Ok(Outcome { settings })
}

fn invert_settings(a: &InvertArgs, seed: u64) -> anyhow::Result<(Value, PtiConfig, OptimizingEncoder)> {
    let pti = PtiConfig {
        learning_rate: a.lr,
        max_steps: a.steps,
        tolerance: a.tolerance,
        ..PtiConfig::default()
    };
    if !(pti.learning_rate > 0.0) || !(pti.tolerance >= 0.0) {
        bail!("--lr must be positive and --tolerance non-negative");
    }
    let encoder = OptimizingEncoder {
        steps: a.encoder_steps,
        ..OptimizingEncoder::new(seed)
    };
    let settings = json!({
        "pti": pti,
        "pivot_encoder": "direct latent optimization fallback (no pretrained image encoder attached)",
        "encoder": encoder,
    });
    Ok((settings, pti, encoder))
}

/// Pivot from the direct-optimization encoder, then generator tuning around it.
fn invert_image(
    ctx: &Ctx,
    img: &garment_edit::ImageBuffer,
    encoder: &OptimizingEncoder,
    pti: &PtiConfig,
) -> anyhow::Result<garment_edit::inversion::InversionResult> {
    let g = &ctx.stack.generator;
    let pivot = encode_pivot(img, g, Some(encoder))?;
    Ok(pti_tune(img, &pivot, g, &ctx.stack.perceptual, pti)?)
}

fn tuned_toy(ctx: &Ctx, tuned: &dyn Generator) -> anyhow::Result<ToyGenerator> {
    Ok(ToyGenerator::from_state(*ctx.stack.generator.config(), &tuned.state())?)
}

fn invert(ctx: &Ctx, a: &InvertArgs) -> anyhow::Result<Outcome> {
    let (settings, pti, encoder) = invert_settings(a, ctx.seed)?;
    let img = read_png(&a.image)?;
    check_image(ctx, &img)?;
    let res = invert_image(ctx, &img, &encoder, &pti)?;
    write_latent(&a.out.join("pivot.bin"), &res.pivot, ctx.seed)?;
    save_toy_generator(&a.out.join("generator.safetensors"), &tuned_toy(ctx, res.tuned_generator.as_ref())?)?;
    history_csv(&a.out.join("history.csv"), &res.history)?;
    write_png(&a.out.join("reconstruction.png"), &res.tuned_generator.synthesize(&res.pivot)?)?;
    let before = ctx.stack.generator.synthesize(&res.pivot)?;
    write_png(&a.out.join("pivot.png"), &before)?;
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "steps_used": res.steps_used,
            "stop": res.stop,
            "initial_loss": res.history.first().map(|r| r.total),
            "final_loss": res.history.last().map(|r| r.total),
        }),
    )?;
    Ok(Outcome { settings })
}

fn optimize_settings(a: &OptimizeArgs) -> anyhow::Result<(Value, LatentOptConfig)> {
    let cfg = LatentOptConfig {
        learning_rate: a.lr,
        max_steps: a.steps,
        weights: LossWeights::latent_optimizer(),
    };
    if cfg.max_steps == 0 || !(cfg.learning_rate > 0.0) {
        bail!("--steps must be at least 1 and --lr positive");
    }
    Ok((json!({ "prompt": a.text, "latent_opt": cfg }), cfg))
}

fn optimize(ctx: &Ctx, a: &OptimizeArgs) -> anyhow::Result<Outcome> {
    let (settings, cfg) = optimize_settings(a)?;
    let w = load_code(ctx, &a.latent)?;
    let res = optimize_latent(&w, &a.text, ctx.stack.backends(), &cfg)?;
    let g = &ctx.stack.generator;
    write_latent(&a.out.join("edited.bin"), &res.edited, ctx.seed)?;
    write_png(&a.out.join("original.png"), &g.synthesize(&w)?)?;
    write_png(&a.out.join("edited.png"), &g.synthesize(&res.edited)?)?;
    history_csv(&a.out.join("history.csv"), &res.history)?;
    let best = &res.history[res.best_step];
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "best_step": res.best_step,
            "best": best,
            "initial": res.history[0],
            "delta_norm": l2_norm(&res.delta)?,
            "max_grad_norm": res.max_grad_norm,
        }),
    )?;
    Ok(Outcome { settings })
}

fn kind_name(k: MapperChoice) -> &'static str {
    match k {
        MapperChoice::Modulated => "modulated",
        MapperChoice::Plain => "plain",
    }
}

fn train_config(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<EditConfig> {
    let mut cfg = match &ctx.cli.config {
        Some(p) => EditConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => EditConfig::default(),
    };
    if let Some(s) = ctx.cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.max_steps = n;
    }
    cfg.validate()?;
    if cfg.partition.layers() != ctx.stack.generator.num_layers() {
        bail!(
            "config partition covers {} layers, the generator has {}",
            cfg.partition.layers(),
            ctx.stack.generator.num_layers()
        );
    }
    if !(a.split > 0.0 && a.split < 1.0) {
        bail!("--split must lie strictly between 0 and 1");
    }
    Ok(cfg)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<Outcome> {
    let cfg = train_config(ctx, a)?;
    let items = read_latent_dir(&a.dataset)?;
    if items.is_empty() {
        bail!("no latent files in {}", a.dataset.display());
    }
    let dataset = split_dataset(items, a.split, cfg.seed)?;
    let stack = &ctx.stack;
    let cond = TextCondition::encode(&a.text, a.color.as_deref(), &stack.encoder)?;
    let shape = MapperShape {
        partition: cfg.partition,
        latent_dim: stack.generator.latent_dim(),
        embed_dim: stack.encoder.embed_dim(),
    };
    let mapper: Box<dyn Mapper> = match a.kind {
        MapperChoice::Modulated => Box::new(ModulatedMapper::new(shape, cfg.inject_fine, cfg.seed)?),
        MapperChoice::Plain => Box::new(PlainMapper::new(shape, cfg.seed)?),
    };
    let test: Vec<LatentCode> = dataset.test().map(|(_, c)| c.clone()).collect();
    let held_out = |m: &dyn Mapper| -> anyhow::Result<Value> {
        if test.is_empty() {
            return Ok(Value::Null);
        }
        Ok(json!({
            "clip": mean_clip_term(m, &test, &cond, &cfg, stack.backends())?,
            "bg": mean_term(m, &test, &cond, &cfg, stack.backends(), "bg")?,
        }))
    };
    let before = held_out(mapper.as_ref())?;
    let policy = CheckpointPolicy {
        dir: a.out.join("checkpoints"),
        keep_best: true,
    };
    std::fs::create_dir_all(&policy.dir)?;
    let outcome = train_mapper(mapper.as_ref(), &dataset, &cond, &cfg, stack.backends(), Some(&policy))?;
    let after = held_out(mapper.as_ref())?;
    save_mapper(&a.out.join("mapper.safetensors"), mapper.as_ref(), &cfg, &cond, outcome.steps)?;
    write_log_csv(&a.out.join("log.csv"), &outcome.log)?;
    cfg.save(&a.out.join("config.toml"))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.items()[i].0.clone()).collect::<Vec<_>>();
    write_json(
        &a.out.join("eval.json"),
        &json!({
            "steps": outcome.steps,
            "best_step": outcome.best_step,
            "best_total": outcome.best_total,
            "running_total": outcome.running_total,
            "train_ids": ids(dataset.train_indices()),
            "test_ids": ids(dataset.test_indices()),
            "held_out_before": before,
            "held_out_after": after,
        }),
    )?;
    Ok(Outcome {
        settings: json!({ "config": cfg, "kind": kind_name(a.kind), "split": a.split, "shape_prompt": a.text, "color_prompt": a.color }),
    })
}

fn edit_settings(a: &EditArgs, stored_shape: &str, stored_color: Option<&str>) -> Value {
    json!({
        "shape_prompt": a.text.as_deref().unwrap_or(stored_shape),
        "color_prompt": a.color.as_deref().or(stored_color),
        "blend": a.blend,
        "encoder_steps": a.image.as_ref().map(|_| a.encoder_steps),
        "pti_steps": a.image.as_ref().map(|_| a.pti_steps),
    })
}

fn edit(ctx: &Ctx, a: &EditArgs) -> anyhow::Result<Outcome> {
    let ck = load_mapper(&a.mapper).with_context(|| format!("loading mapper {}", a.mapper.display()))?;
    ck.check_against(&ctx.stack.generator)?;
    let settings = edit_settings(a, &ck.shape_prompt, ck.color_prompt.as_deref());
    let shape = a.text.as_deref().unwrap_or(&ck.shape_prompt);
    let color = a.color.as_deref().or(ck.color_prompt.as_deref());
    let cond = TextCondition::encode(shape, color, &ctx.stack.encoder)?;

    let mut tuned: Option<Box<dyn Generator>> = None;
    let w = match (&a.latent, &a.image) {
        (Some(p), _) => load_code(ctx, p)?,
        (None, Some(p)) => {
            let img = read_png(p)?;
            check_image(ctx, &img)?;
            let encoder = OptimizingEncoder {
                steps: a.encoder_steps,
                ..OptimizingEncoder::new(ctx.seed)
            };
            let pti = PtiConfig {
                max_steps: a.pti_steps,
                ..PtiConfig::default()
            };
            let res = invert_image(ctx, &img, &encoder, &pti)?;
            write_latent(&a.out.join("pivot.bin"), &res.pivot, ctx.seed)?;
            if a.pti_steps > 0 {
                tuned = Some(res.tuned_generator);
            }
            res.pivot
        }
        (None, None) => bail!("either --latent or --image is required"),
    };
    let g: &dyn Generator = tuned.as_deref().unwrap_or(&ctx.stack.generator);
    let original = g.synthesize(&w)?;
    let (mut edited, w_edit) = apply_edit(ck.mapper.as_ref(), &w, &cond, g)?;
    if a.blend {
        let preserve = mask_background(&ctx.stack.parser.parse(&original)?, &ctx.stack.parser.parse(&edited)?)?;
        edited = blend_preserved_regions(&original.detach(), &edited, &preserve)?;
    }
    write_latent(&a.out.join("edited.bin"), &w_edit, ctx.seed)?;
    write_png(&a.out.join("original.png"), &original)?;
    write_png(&a.out.join("edited.png"), &edited)?;
    let residual: Vec<f64> = w_edit.to_vec()?.iter().zip(w.to_vec()?).map(|(a, b)| a - b).collect();
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "mapper_step": ck.step,
            "mapper_kind": ck.mapper.kind().name(),
            "residual_norm": residual.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }),
    )?;
    Ok(Outcome { settings })
}

/// PNG files of `original` paired by name with those of `edited`.
fn collect_pairs(original: &Path, edited: &Path) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(original)
        .with_context(|| format!("listing {}", original.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNG files in {}", original.display());
    }
    names
        .into_iter()
        .map(|p| {
            let file = p.file_name().context("bad file name")?;
            let other = edited.join(file);
            if !other.is_file() {
                bail!("no edited image {} for {}", other.display(), p.display());
            }
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, p, other))
        })
        .collect()
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> anyhow::Result<Outcome> {
    if !(a.psnr_cap > 0.0) {
        bail!("--psnr-cap must be positive");
    }
    let pairs = collect_pairs(&a.original, &a.edited)?
        .into_iter()
        .map(|(id, o, e)| {
            Ok(ImagePair {
                id,
                orig: read_png(&o)?,
                edited: read_png(&e)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let opts = EvalOptions {
        psnr_cap: a.psnr_cap,
        jobs: ctx.cli.jobs,
    };
    let report = evaluate_folder(&pairs, &ctx.stack.parser, a.region, &ctx.stack.identity as &dyn IdentityFeatures, &opts)?;
    write_json(&a.out.join("report.json"), &report)?;
    Ok(Outcome {
        settings: json!({ "region": a.region, "psnr_cap": a.psnr_cap }),
    })
}
