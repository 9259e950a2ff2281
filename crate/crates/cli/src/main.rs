//! `mixnet`: generation, feature extraction, training, protocol evaluation
//! and diagnostics from one binary.
//!
//! Exit status is 0 on success, 1 on a domain error (reported as a single
//! `error: <kind>: <message>` line on stderr) and 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "mixnet", version, about = "Face presentation attack detection toolkit")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Assign stratified video-level folds to a manifest.
    Folds(FoldsArgs),
    /// Extract handcrafted descriptors into a feature dump.
    Features(FeaturesArgs),
    /// Train one model on a whole manifest.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    Evaluate(EvaluateArgs),
    /// Compare joint MixNet training against independent specialists.
    Ablate(AblateArgs),
    /// Class activation maps of one MixNet branch.
    Cam(CamArgs),
    /// Table and 3D figure of per-branch scores.
    Scatter(ScatterArgs),
    /// ROC figure from one or more score files.
    Roc(RocArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthVariant {
    /// Genuine, print, replay, mask.
    Intra,
    /// Genuine plus paper, half, transparent and mannequin masks.
    Unseen,
    /// Unseen variant plus silicone masks.
    CrossUnseen,
    /// Genuine, print, replay.
    TwoAttack,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "intra")]
    pub variant: SynthVariant,
    #[arg(long, default_value_t = 30)]
    pub videos: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Class signature strength in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    /// Also assign this many folds.
    #[arg(long)]
    pub folds: Option<u32>,
}

#[derive(Args, Debug, Serialize)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub folds: u32,
}

#[derive(Args, Debug, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `lbp59+hog324` or `mslbp`.
    #[arg(long, default_value = "lbp59+hog324")]
    pub descriptor: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneArg {
    SmallCnn,
    Resnet50,
    Densenet121,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineArg {
    /// Jointly trained MixNet.
    Joint,
    /// Independent specialists, maximum score.
    Max,
    /// Independent specialists, mean score.
    Average,
}

/// Model selection and training hyperparameters.
#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "small-cnn")]
    pub backbone: BackboneArg,
    /// Pretrained backbone weights (parameter archive). Never downloaded.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Loss weights `a1,a2,a3,a4` (branch weights, then the final weight).
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    /// Defaults to 16 for MixNet and 56 for single backbones.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "joint")]
    pub combine: CombineArg,
    /// Train a single backbone instead of specialists.
    #[arg(long)]
    pub vanilla: bool,
    /// Use a handcrafted descriptor with an RBF SVM instead of a network.
    #[arg(long)]
    pub descriptor: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolArg {
    Intra,
    CrossUnseen,
    Predefined,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Acer,
    Hter,
    Eer,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub protocol: Option<ProtocolArg>,
    /// Protocol definition file; overrides `--protocol` and `--manifest`.
    #[arg(long)]
    pub protocol_file: Option<PathBuf>,
    /// intra: the dataset. cross-unseen: the unseen dataset. predefined:
    /// give twice, train then test.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// cross-unseen: output directory of the intra run to reuse.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Folds to assign when the manifest has none.
    #[arg(long, default_value_t = 3)]
    pub folds: u32,
    #[arg(long)]
    pub metric: Option<MetricArg>,
    /// Evaluate per-video mean scores instead of frames.
    #[arg(long)]
    pub video_mean: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub folds: u32,
    #[arg(long, default_value = "small-cnn")]
    pub backbone: BackboneArg,
    #[arg(long)]
    pub alphas: Option<String>,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    /// MixNet batch size; specialists use `--specialist-batch-size`.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub specialist_batch_size: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchArg {
    Print,
    Replay,
    Mask,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CamClassArg {
    Attack,
    Genuine,
}

#[derive(Args, Debug, Serialize)]
pub struct CamArgs {
    /// MixNet checkpoint.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "print")]
    pub branch: BranchArg,
    /// Head row used to weight the feature maps.
    #[arg(long, default_value = "attack")]
    pub class: CamClassArg,
    /// Only the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct ScatterArgs {
    /// Score file (JSON Lines) with branch scores.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plot two-branch scores in 2D.
    #[arg(long)]
    pub two_d: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct RocArgs {
    /// Score files, one curve each.
    #[arg(long, required = true)]
    pub scores: Vec<PathBuf>,
    /// Curve labels, in `--scores` order (default: file stem).
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
