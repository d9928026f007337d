mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};

/// Bounding-box supervised CT segmentation: synthetic phantoms, pseudo
/// masks, training, inference and evaluation.
#[derive(Debug, Parser)]
#[command(name = "boxseg", version)]
struct Cli {
    /// Seed for every random choice (phantoms, k-means, initialisation, shuffling, folds)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with optional sections `phantom`, `profile`, `pseudo_mask`, `train`, `arch`; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus of synthetic phantoms with exact ground truth
    Phantom(PhantomArgs),
    /// Window and normalise CT volumes, optionally cropping the organ slab and resizing
    Preprocess(PreprocessArgs),
    /// Derive per-slice bounding boxes from dense ground truth
    Bbox(BboxArgs),
    /// Build trinary pseudo masks from normalised volumes and their boxes
    Pseudomask(PseudomaskArgs),
    /// Train the network on pseudo masks with label ensembling, per fold
    Train(TrainArgs),
    /// Predict probability maps with a trained checkpoint
    Infer(InferArgs),
    /// Score predictions against ground truth and write a CSV report
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    /// Number of phantoms; case i uses seed + i
    #[arg(long)]
    pub count: usize,
    /// Volume shape as S,H,W, each divisible by 8 [default: 16,32,32]
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Number of ellipsoids, 1 or 2 [default: 1]
    #[arg(long)]
    pub n_blobs: Option<usize>,
    /// Per-voxel noise standard deviation in HU [default: 10]
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Chance that a blob receives a hole [default: 0.3]
    #[arg(long)]
    pub hole_probability: Option<f64>,
    /// Remove voxel noise and tissue-level jitter
    #[arg(long)]
    pub noiseless: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// HU volume to process
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub image: Option<PathBuf>,
    /// Ground truth carried through the same crop and resize; also the slab reference
    #[arg(long, requires = "image")]
    pub gt: Option<PathBuf>,
    /// Case manifest; every image (and gt, when listed) is processed
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Organ preset: liver (-60,140), spleen (-115,185), kidneys (-95,155)
    #[arg(long, default_value = "liver")]
    pub organ: String,
    /// HU window as LOW,HIGH [default: organ preset]
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub window: Option<Vec<f64>>,
    /// Crop to the slices containing ground truth
    #[arg(long)]
    pub crop_slab: bool,
    /// Resample to the target shape
    #[arg(long)]
    pub resize: bool,
    /// Target shape S,H,W for --resize [default: organ preset, 512x512 in-plane]
    #[arg(long, value_delimiter = ',')]
    pub target_shape: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct BboxArgs {
    /// Ground-truth label volume
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub gt: Option<PathBuf>,
    /// Case manifest with `gt` entries
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pixels added on every side of each box
    #[arg(long, default_value_t = boxseg::preprocess::DEFAULT_BOX_MARGIN)]
    pub margin: usize,
    /// One box per side for paired organs (kidneys)
    #[arg(long)]
    pub split_lr: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PseudomaskArgs {
    /// Normalised volume
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest", requires = "boxes")]
    pub image: Option<PathBuf>,
    /// Box file for --image
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Case manifest with `image` and `boxes` entries
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Organ whose cluster counts to use: liver 3,4; spleen 2,3; kidneys 2,3
    #[arg(long)]
    pub organ: Option<String>,
    /// Two distinct cluster counts, overriding --organ [default: 2,3]
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Holes smaller than this many pixels are filled [default: 10]
    #[arg(long)]
    pub hole_area_max: Option<usize>,
    /// Components below this fraction of the largest one are removed [default: 0.01]
    #[arg(long)]
    pub fg_component_min_frac: Option<f64>,
    /// Radius of the square closing element [default: 1]
    #[arg(long)]
    pub closing_radius: Option<usize>,
    /// k-means restarts per slice [default: 5]
    #[arg(long)]
    pub kmeans_restarts: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Case manifest with normalised `image` and `pseudo_mask` entries
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cross-validation folds; 1 trains a single model on every case [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only this fold (1-based)
    #[arg(long)]
    pub fold: Option<usize>,
    /// Label ensembling weight [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dice smoothing constant [default: 1e-7]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Epochs with Adam [default: 3]
    #[arg(long)]
    pub adam_epochs: Option<usize>,
    /// Epochs with SGD after Adam [default: 17]
    #[arg(long)]
    pub sgd_epochs: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub adam_lr: Option<f64>,
    /// Initial SGD learning rate [default: 1e-3]
    #[arg(long)]
    pub sgd_lr: Option<f64>,
    /// SGD decay rate per decay period [default: 0.94]
    #[arg(long)]
    pub lr_decay_rate: Option<f64>,
    /// SGD steps per decay period [default: 100]
    #[arg(long)]
    pub lr_decayed_step: Option<u64>,
    /// Channels of the first level [default: 8]
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Continue runs found in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Normalised volume
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub image: Option<PathBuf>,
    /// Case manifest with normalised `image` entries
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Prediction: a probability map (binarised at --threshold) or a label volume
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest", requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground-truth label volume
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Case manifest with `prediction` and `gt` entries
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Probabilities strictly above this become foreground
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    seed: u64,
    config: serde_json::Value,
    tool_version: &'static str,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BOXSEG_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage("BOXSEG_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage("BOXSEG_THREADS", e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let started = unix_ms();
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::usage("out", format!("cannot create {}: {e}", cli.out.display())))?;
    let ctx = commands::Context { seed: cli.seed, out: cli.out.clone(), file: file_cfg };
    let (name, resolved) = match &cli.command {
        Command::Phantom(a) => ("phantom", commands::phantom(&ctx, a)?),
        Command::Preprocess(a) => ("preprocess", commands::preprocess(&ctx, a)?),
        Command::Bbox(a) => ("bbox", commands::bbox(&ctx, a)?),
        Command::Pseudomask(a) => ("pseudomask", commands::pseudomask(&ctx, a)?),
        Command::Train(a) => ("train", commands::train(&ctx, a)?),
        Command::Infer(a) => ("infer", commands::infer(&ctx, a)?),
        Command::Eval(a) => ("eval", commands::eval(&ctx, a)?),
    };
    let manifest = RunManifest {
        command: name,
        argv: std::env::args().collect(),
        seed: cli.seed,
        config: resolved,
        tool_version: env!("CARGO_PKG_VERSION"),
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    commands::write_json(&cli.out.join("run_manifest.json"), &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let field = match e.get(clap::error::ContextKind::InvalidArg) {
                Some(clap::error::ContextValue::String(arg)) => arg.clone(),
                _ => String::new(),
            };
            let message = e.render().to_string();
            let message = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "field": field, "path": null, "message": message } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
