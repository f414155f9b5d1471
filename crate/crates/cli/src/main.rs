//! `misfitlab`: generate data, train, evaluate and serve from one binary.

mod commands;
mod config;
mod fail;
mod manifest;

use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Preset, Source};
use misfitlab::victor::TaskMode;

#[derive(Parser, Debug)]
#[command(name = "misfitlab", version, about = "Outfit compatibility regression and mismatching-item detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seeds every stage; overrides the config file's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run configuration; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Artifact root; every stage writes one subdirectory below it.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic garment universe and compatible/incompatible outfits.
    GenerateUniverse(UniverseArgs),
    /// MISFIT samples with fractional compatibility targets.
    GenMisfits(MisfitArgs),
    /// Contrastive image-text pre-training.
    TrainFlip(FlipArgs),
    /// Feature cache for every garment.
    ExtractFeatures(FeatureArgs),
    /// Train VICTOR on cached features.
    TrainVictor(VictorArgs),
    /// Test-split metrics of a model, or the task-mode/alpha ablation.
    Evaluate(EvalArgs),
    /// Operation counts and the efficiency table.
    FlopsReport(FlopsArgs),
    /// Every stage from universe to evaluation.
    Pipeline(PipelineArgs),
    /// HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct UniverseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub archetypes: Option<usize>,
    /// Garments per (category, archetype) cell.
    #[arg(long)]
    pub items_per_cell: Option<usize>,
    #[arg(long)]
    pub compatible: Option<usize>,
    #[arg(long)]
    pub incompatible: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MisfitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to `<out>/universe/corpus.json`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// MISFITs per compatible outfit.
    #[arg(long)]
    pub m: Option<usize>,
    /// Leave the fully incompatible outfits out of the dataset.
    #[arg(long)]
    pub no_incompatible: bool,
}

#[derive(Args, Debug)]
pub struct FlipArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FeatureArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    /// Defaults to `<out>/flip/flip.bin`.
    #[arg(long)]
    pub flip: Option<PathBuf>,
    /// Width of raw features.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct VictorFlags {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// OCb, OCr, MID or MTL.
    #[arg(long)]
    pub mode: Option<TaskMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Concatenate text features after the visual ones.
    #[arg(long)]
    pub multimodal: bool,
}

#[derive(Args, Debug)]
pub struct VictorArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub victor: VictorFlags,
    /// Defaults to `<out>/misfits-m2/dataset.json`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Defaults to `<out>/features/features.cache`.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub victor: VictorFlags,
    /// Defaults to `<out>/VICTOR[MTL;0.2;2]/victor.bin`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Train and compare OCr, MID and MTL over the alpha grid.
    #[arg(long)]
    pub ablation: bool,
    /// Alpha grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub victor: VictorFlags,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    #[arg(long)]
    pub flip_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, env = misfitlab_serve::ENV_MODEL)]
    pub model: PathBuf,
    /// The `corpus.json` written by generate-universe.
    #[arg(long, env = misfitlab_serve::ENV_CATALOG)]
    pub catalog: PathBuf,
    #[arg(long, env = misfitlab_serve::ENV_FEATURES)]
    pub features: PathBuf,
    #[arg(long, env = misfitlab_serve::ENV_PORT, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(f) = commands::run(cli.command) {
        eprintln!("error: {f}");
        std::process::exit(f.code);
    }
}
