//! Mapper training over a set of precomputed latent codes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Generator};
use crate::config::EditConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io::save_mapper;
use crate::latent::LatentCode;
use crate::losses::{disentangled_edit_loss, latent_optimizer_loss, WeightedLoss};
use crate::mapper::{Mapper, MapperKind};
use crate::mask::RegionMask;
use crate::optim::build_optimizer;
use crate::text::TextCondition;

/// Named codes with a fixed train/test split.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    items: Vec<(String, LatentCode)>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl LatentDataset {
    pub fn items(&self) -> &[(String, LatentCode)] {
        &self.items
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn train(&self) -> impl Iterator<Item = &(String, LatentCode)> {
        self.train.iter().map(|&i| &self.items[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &(String, LatentCode)> {
        self.test.iter().map(|&i| &self.items[i])
    }
}

/// Shuffles with `seed` and puts the first `round(n · ratio)` items in the
/// training split.
pub fn split_dataset(items: Vec<(String, LatentCode)>, ratio: f64, seed: u64) -> Result<LatentDataset> {
    if items.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n);
    let test = order.split_off(n_train);
    Ok(LatentDataset {
        items,
        train: order,
        test,
    })
}

/// One scalar of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Rows for every term and the total of each executed step.
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_total: Option<f64>,
    /// Exponential moving average of the total, smoothing 0.99.
    pub running_total: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    /// Also keep `best.safetensors` with the lowest single-step total.
    pub keep_best: bool,
}

/// The loss a mapper of `kind` is trained with: all five terms for the
/// modulated mapper, clip/norm/identity against the shape prompt otherwise.
pub fn mapper_loss(
    kind: MapperKind,
    w: &LatentCode,
    residual: &LatentCode,
    cond: &TextCondition,
    cfg: &EditConfig,
    backends: Backends<'_>,
) -> Result<WeightedLoss> {
    let weights = cfg.effective_weights();
    match kind {
        MapperKind::Modulated => disentangled_edit_loss(w, residual, cond, &weights, backends),
        MapperKind::Plain => latent_optimizer_loss(w, residual, cond.shape_embedding(), &weights, backends),
    }
}

/// Batch-size-one training: each step draws the next training code (reshuffled
/// every epoch from `cfg.seed`), computes the residual and loss, and applies
/// one optimizer update.
pub fn train_mapper(
    mapper: &dyn Mapper,
    dataset: &LatentDataset,
    cond: &TextCondition,
    cfg: &EditConfig,
    backends: Backends<'_>,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<TrainOutcome> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.learning_rate)));
    }
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        steps: 0,
        best_step: None,
        best_total: None,
        running_total: None,
        checkpoints: Vec::new(),
    };
    if cfg.max_steps == 0 {
        return Ok(outcome);
    }
    if dataset.train_indices().is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let g = backends.generator;
    let shape = mapper.shape();
    if shape.partition.layers() != g.num_layers() || shape.latent_dim != g.latent_dim() {
        return Err(Error::Shape(format!(
            "mapper is built for ({}, {}) codes but the generator takes ({}, {})",
            shape.partition.layers(),
            shape.latent_dim,
            g.num_layers(),
            g.latent_dim()
        )));
    }
    if let Some(p) = checkpoints {
        std::fs::create_dir_all(&p.dir)?;
    }
    let mut opt = build_optimizer(cfg.optimizer, mapper.parameters(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = dataset.train_indices().to_vec();
    let mut cursor = order.len();
    for step in 0..cfg.max_steps {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (id, code) = &dataset.items()[order[cursor]];
        cursor += 1;
        let w = code.detach();
        let loss = mapper
            .residual(&w, cond)
            .and_then(|r| mapper_loss(mapper.kind(), &w, &r, cond, cfg, backends))
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("sample {id} at step {step}: {msg}")),
                other => other,
            })?;
        let total = loss.report.total;
        let improved = outcome.best_total.is_none_or(|b| total < b);
        if improved {
            outcome.best_total = Some(total);
            outcome.best_step = Some(step);
            if let Some(p) = checkpoints.filter(|p| p.keep_best) {
                // Saved before the update so the file holds the parameters that scored `total`.
                save_mapper(&p.dir.join("best.safetensors"), mapper, cfg, cond, step)?;
            }
        }
        opt.step(&loss.total.backward()?)?;
        for (term, value) in &loss.report.terms {
            outcome.log.push(LogRow {
                step,
                term: term.clone(),
                value: *value,
            });
        }
        outcome.log.push(LogRow {
            step,
            term: "total".into(),
            value: total,
        });
        outcome.steps = step + 1;
        outcome.running_total = Some(match outcome.running_total {
            Some(avg) => 0.99 * avg + 0.01 * total,
            None => total,
        });
        if let Some(p) = checkpoints {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = p.dir.join(format!("step-{:08}.safetensors", step + 1));
                save_mapper(&path, mapper, cfg, cond, step + 1)?;
                outcome.checkpoints.push(path);
            }
        }
    }
    Ok(outcome)
}

/// Mean clip term of `mapper` over `codes`.
pub fn mean_clip_term(
    mapper: &dyn Mapper,
    codes: &[LatentCode],
    cond: &TextCondition,
    cfg: &EditConfig,
    backends: Backends<'_>,
) -> Result<f64> {
    mean_term(mapper, codes, cond, cfg, backends, "clip")
}

/// Mean of one term of the five-term loss over `codes`, whatever the mapper kind.
pub fn mean_term(
    mapper: &dyn Mapper,
    codes: &[LatentCode],
    cond: &TextCondition,
    cfg: &EditConfig,
    backends: Backends<'_>,
    term: &str,
) -> Result<f64> {
    if codes.is_empty() {
        return Err(Error::Config("no codes to evaluate".into()));
    }
    let mut sum = 0.0;
    for w in codes {
        let w = w.detach();
        let r = mapper.residual(&w, cond)?.detach();
        sum += disentangled_edit_loss(&w, &r, cond, &cfg.effective_weights(), backends)?
            .report
            .term(term);
    }
    Ok(sum / codes.len() as f64)
}

/// `w' = w + M(w, cond)` and its rendering.
pub fn apply_edit(
    mapper: &dyn Mapper,
    w: &LatentCode,
    cond: &TextCondition,
    generator: &dyn Generator,
) -> Result<(ImageBuffer, LatentCode)> {
    if w.layers() != generator.num_layers() || w.dim() != generator.latent_dim() {
        return Err(Error::Shape(format!(
            "code ({}, {}) does not fit the generator ({}, {})",
            w.layers(),
            w.dim(),
            generator.num_layers(),
            generator.latent_dim()
        )));
    }
    let w = w.detach();
    let edited = w.offset(&mapper.residual(&w, cond)?)?.detach();
    Ok((generator.synthesize(&edited)?.detach(), edited))
}

/// `mask · orig + (1 − mask) · edited` per pixel.
pub fn blend_preserved_regions(orig: &ImageBuffer, edited: &ImageBuffer, preserve: &RegionMask) -> Result<ImageBuffer> {
    orig.same_shape(edited)?;
    orig.same_range(edited)?;
    if preserve.height() != orig.height() || preserve.width() != orig.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match images {}x{}",
            preserve.height(),
            preserve.width(),
            orig.height(),
            orig.width()
        )));
    }
    let m = preserve.channel_broadcast()?;
    let blended = (orig.tensor().broadcast_mul(&m)? + edited.tensor().broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
    ImageBuffer::new(blended, orig.range())
}

/// Writes the log as `step,term,value` CSV.
pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,term,value\n");
    for row in log {
        out.push_str(&format!("{},{},{:e}\n", row.step, row.term, row.value));
    }
    std::fs::write(path, out)?;
    Ok(())
}
