//! `sidetune`: synthetic data, backbone conversion, training, evaluation,
//! prediction, reporting and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract violation.

mod commands;
mod convert;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "sidetune", version, about = "Ladder-side tuning for multi-organ segmentation")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic volumetric dataset.
    Synth(SynthArgs),
    /// Convert a safetensors SAM image-encoder checkpoint into a backbone checkpoint.
    ConvertBackbone(ConvertArgs),
    /// Train a model (or the four ablation variants).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict one case and write overlays.
    Predict(PredictArgs),
    /// Render comparison tables with reference rows.
    Report(ReportArgs),
    /// Describe a checkpoint or dataset directory.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    /// Including background.
    #[arg(long, default_value_t = 9)]
    pub classes: usize,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub min_slices: usize,
    #[arg(long, default_value_t = 16)]
    pub max_slices: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.6)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// vit_b or toy.
    #[arg(long, default_value = "vit_b")]
    pub variant: String,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    /// Name prefix of the image encoder tensors in the source file.
    #[arg(long, default_value = "image_encoder.")]
    pub prefix: String,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with training fields at top level and an optional [model] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// toy or vit_b.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Converted backbone checkpoint directory.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Train all four ablation variants and evaluate each on the test split.
    #[arg(long)]
    pub ablation: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub warmup_iters: Option<u64>,
    /// constant or cosine.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// free, 0 (side encoder only) or 1 (backbone only).
    #[arg(long)]
    pub gate: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dice_smooth: Option<f64>,
    #[arg(long)]
    pub include_background: Option<bool>,
    #[arg(long)]
    pub per_image_dice: Option<bool>,
    /// Decoder tensor patterns to train (repeatable), relative to `decoder.`.
    #[arg(long)]
    pub trainable_decoder: Vec<String>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub max_angle_deg: Option<f64>,
    #[arg(long)]
    pub digest_every: Option<u64>,
    #[arg(long)]
    pub recalibrate_bn: Option<bool>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Substitute this distance (mm) for undefined HD95 instead of excluding it.
    #[arg(long)]
    pub undefined_penalty: Option<f64>,
    /// Row label in the summary CSV.
    #[arg(long, default_value = "Ours")]
    pub label: String,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub case: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_overlays: bool,
}

#[derive(Args)]
pub struct ReportArgs {
    /// LABEL=PATH of a per-case metrics CSV; adds a Table I row.
    #[arg(long)]
    pub metrics: Vec<String>,
    /// Ablation summary CSV (method,dsc,hd95); adds Table II rows.
    #[arg(long)]
    pub ablation: Vec<PathBuf>,
    #[arg(long)]
    pub undefined_penalty: Option<f64>,
    /// Also write report.txt, table1.csv and table2.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<sidetune::Error>() {
        Some(sidetune::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn,sidetune=info",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.cmd {
        Cmd::Synth(a) => commands::synth(a),
        Cmd::ConvertBackbone(a) => commands::convert_backbone(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Predict(a) => commands::predict(a),
        Cmd::Report(a) => commands::report(a),
        Cmd::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
