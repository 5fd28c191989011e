//! The `garment-edit` command line: argument parsing, run directories and
//! reproducibility manifests.
//!
//! Every command writes into a fresh output directory and finishes by writing
//! `manifest.json` there, recording the exact arguments, seed, backends and a
//! SHA-256 digest of every input and output file. `replay` re-executes a
//! manifest and checks that the outputs come out byte-identical.

mod commands;
mod manifest;
mod pngio;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use manifest::{digest_file, Manifest, MANIFEST_FILE};
pub use pngio::{read_png, write_png};

/// Which model stack to run against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorSpec {
    Toy,
    /// A generator archive written by `invert`, with toy encoder, parser and
    /// identity trunk built around it.
    Checkpoint(PathBuf),
}

impl FromStr for GeneratorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "toy" {
            return Ok(GeneratorSpec::Toy);
        }
        match s.strip_prefix("checkpoint:") {
            Some(p) if !p.is_empty() => Ok(GeneratorSpec::Checkpoint(PathBuf::from(p))),
            _ => Err(format!("expected `toy` or `checkpoint:<path>`, got `{s}`")),
        }
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorSpec::Toy => write!(f, "toy"),
            GeneratorSpec::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "garment-edit", version, about = "Text-driven garment editing on style latent codes")]
pub struct Cli {
    /// Model stack: `toy` or `checkpoint:<path>`.
    #[arg(long, visible_alias = "backend", global = true, default_value = "toy")]
    pub generator: GeneratorSpec,
    /// Seed for the toy stack and every random choice of the run [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML edit configuration, used by train-mapper.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Validate the inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for commands that can use them.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Draw random latent codes from the toy prior.
    SampleLatents(SampleArgs),
    /// Find a pivot code for an image and fine-tune the generator around it.
    Invert(InvertArgs),
    /// Edit one latent code by direct optimization against a prompt.
    Optimize(OptimizeArgs),
    /// Train a text-conditioned mapper over a folder of latent codes.
    TrainMapper(TrainArgs),
    /// Apply a trained mapper to a latent code or an image.
    Edit(EditArgs),
    /// Compare folders of original and edited images.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub count: usize,
    /// Spread of each coordinate around the prior centre.
    #[arg(long, default_value_t = 0.015)]
    pub std: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator fine-tuning steps.
    #[arg(long, default_value_t = 3500)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Stop when the loss changes by less than this between steps.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Steps of the direct-optimization pivot encoder.
    #[arg(long, default_value_t = 200)]
    pub encoder_steps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub latent: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapperChoice {
    Modulated,
    Plain,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Folder of latent files.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Shape prompt.
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub color: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MapperChoice::Modulated)]
    pub kind: MapperChoice,
    /// Fraction of codes used for training; the rest are held out.
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    /// Overrides `max_steps` from the configuration.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["latent", "image"])))]
pub struct EditArgs {
    #[arg(long)]
    pub mapper: PathBuf,
    #[arg(long)]
    pub latent: Option<PathBuf>,
    /// A PNG to invert first.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Overrides the shape prompt stored with the mapper.
    #[arg(long)]
    pub text: Option<String>,
    /// Overrides the colour prompt stored with the mapper.
    #[arg(long)]
    pub color: Option<String>,
    /// Copy pixels outside both garment parses from the original.
    #[arg(long)]
    pub blend: bool,
    #[arg(long, default_value_t = 200)]
    pub encoder_steps: usize,
    /// Generator fine-tuning steps when editing an image; 0 skips tuning.
    #[arg(long, default_value_t = 0)]
    pub pti_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Folder of original PNGs.
    #[arg(long)]
    pub original: PathBuf,
    /// Folder of edited PNGs with matching file names.
    #[arg(long)]
    pub edited: PathBuf,
    /// FULL, FOREGROUND or BACKGROUND.
    #[arg(long, default_value = "FOREGROUND")]
    pub region: garment_edit::Region,
    #[arg(long, default_value_t = garment_edit::metrics::DEFAULT_PSNR_CAP)]
    pub psnr_cap: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh directory for the re-run.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SampleLatents(_) => "sample-latents",
            Command::Invert(_) => "invert",
            Command::Optimize(_) => "optimize",
            Command::TrainMapper(_) => "train-mapper",
            Command::Edit(_) => "edit",
            Command::Evaluate(_) => "evaluate",
            Command::Replay(_) => "replay",
        }
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Command::SampleLatents(a) => &mut a.out,
            Command::Invert(a) => &mut a.out,
            Command::Optimize(a) => &mut a.out,
            Command::TrainMapper(a) => &mut a.out,
            Command::Edit(a) => &mut a.out,
            Command::Evaluate(a) => &mut a.out,
            Command::Replay(a) => &mut a.out,
        }
    }

    fn inputs_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::SampleLatents(_) => vec![],
            Command::Invert(a) => vec![&mut a.image],
            Command::Optimize(a) => vec![&mut a.latent],
            Command::TrainMapper(a) => vec![&mut a.dataset],
            Command::Edit(a) => {
                let mut v = vec![&mut a.mapper];
                v.extend(a.latent.as_mut());
                v.extend(a.image.as_mut());
                v
            }
            Command::Evaluate(a) => vec![&mut a.original, &mut a.edited],
            Command::Replay(a) => vec![&mut a.manifest],
        }
    }
}

impl Cli {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Every file or folder the run reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let mut me = self.clone();
        let mut out: Vec<PathBuf> = me.command.inputs_mut().into_iter().map(|p| p.clone()).collect();
        out.extend(self.config.clone());
        if let GeneratorSpec::Checkpoint(p) = &self.generator {
            out.push(p.clone());
        }
        out
    }

    /// Resolves relative input paths against `base` and redirects the output.
    fn rebase(&mut self, base: &Path, out: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.command.inputs_mut() {
            join(p);
        }
        if let Some(p) = self.config.as_mut() {
            join(p);
        }
        if let GeneratorSpec::Checkpoint(p) = &mut self.generator {
            join(p);
        }
        *self.command.out_mut() = out.to_path_buf();
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    execute(&cli, &argv)
}

/// Runs an already parsed command line; `argv` is recorded in the manifest.
pub fn execute(cli: &Cli, argv: &[OsString]) -> anyhow::Result<()> {
    if cli.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    if let Command::Replay(args) = &cli.command {
        return replay(args);
    }
    let argv: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_str().map(str::to_string).context("arguments must be valid UTF-8"))
        .collect::<anyhow::Result<_>>()?;
    commands::run_recorded(cli, argv)
}

fn replay(args: &ReplayArgs) -> anyhow::Result<()> {
    let recorded = Manifest::load(&args.manifest)?;
    let mut argv = vec![OsString::from("garment-edit")];
    argv.extend(recorded.argv.iter().map(OsString::from));
    let mut cli = Cli::try_parse_from(&argv).context("manifest holds an unparsable command line")?;
    if matches!(cli.command, Command::Replay(_)) {
        bail!("a replay manifest cannot itself be replayed");
    }
    if cli.dry_run {
        bail!("the manifest records a dry run");
    }
    cli.rebase(&recorded.cwd, &args.out);
    recorded.check_inputs(&cli.inputs())?;
    commands::run_recorded(&cli, recorded.argv.clone())?;
    let fresh = Manifest::load(&args.out.join(MANIFEST_FILE))?;
    let diffs = recorded.output_differences(&fresh);
    if !diffs.is_empty() {
        bail!("replay of `{}` differs from the record:\n  {}", recorded.command, diffs.join("\n  "));
    }
    println!(
        "replayed {}: {} output files byte-identical",
        recorded.command,
        recorded.outputs.len()
    );
    Ok(())
}
