use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thpn::anchors::QualityKind;
use thpn::losses::QualityLossKind;

#[derive(Debug, Parser)]
#[command(
    name = "thpn",
    version,
    about = "Hybrid classification/localization proposals with open-world self-training"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with per-anchor features.
    Synth(SynthArgs),
    /// Train a model, then fine-tune it on pseudo-labels for a few rounds.
    Selftrain(SelftrainArgs),
    /// Evaluate a checkpoint: AR@k and AUC on the ID, OOD and ALL subsets.
    Eval(EvalArgs),
    /// Self-train and evaluate over a grid of blend weights and budgets.
    Sweep(SweepArgs),
    /// Print evaluation reports as tables.
    Report(ReportArgs),
    /// Compare blend weights and self-training over several synthetic seeds.
    Openset(OpensetArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Selftrain(_) => "selftrain",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Report(_) => "report",
            Command::Openset(_) => "openset",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory [default: $THPN_OUT_ROOT/<command>, with root "runs"].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Split config JSON [default: <data>/split.json].
    #[arg(long)]
    pub split: Option<PathBuf>,
}

/// Training knobs shared by `selftrain` and `sweep`. Unset values take the
/// library defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Self-training rounds after the initial training [default: 3].
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Initial epochs E; fine-tuning runs E/4 per round [default: 16].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Localization quality target [default: centerness].
    #[arg(long, value_enum)]
    pub quality: Option<QualityArg>,
    /// Localization quality loss [default: lqf].
    #[arg(long, value_enum)]
    pub quality_loss: Option<QualityLossArg>,
    /// NMS IoU for pseudo-label mining and evaluation [default: 0.7].
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Box regression weight [default: 1].
    #[arg(long)]
    pub lambda_box: Option<f64>,
    /// SGD step size of the initial training [default: 0.1].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Hidden width of the toy model [default: 16].
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QualityArg {
    Centerness,
    Iou,
}

impl From<QualityArg> for QualityKind {
    fn from(q: QualityArg) -> Self {
        match q {
            QualityArg::Centerness => QualityKind::Centerness,
            QualityArg::Iou => QualityKind::Iou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QualityLossArg {
    Lqf,
    L1,
}

impl From<QualityLossArg> for QualityLossKind {
    fn from(q: QualityLossArg) -> Self {
        match q {
            QualityLossArg::Lqf => QualityLossKind::Lqf,
            QualityLossArg::L1 => QualityLossKind::L1,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Synthetic config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelftrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Blend weight between the classification and quality losses.
    #[arg(long, default_value_t = 0.0)]
    pub lambda_cls: f64,
    /// Pseudo-label budget as a percentage of the original labels [default: 30].
    #[arg(long)]
    pub p_percent: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on the validation scenes after every round.
    #[arg(long)]
    pub eval_rounds: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Partition {
    Train,
    Val,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Model checkpoint written by `selftrain`
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Which scenes to evaluate on.
    #[arg(long, value_enum, default_value_t = Partition::Val)]
    pub on: Partition,
    /// Blend weight at inference [default: the checkpoint's training value].
    #[arg(long)]
    pub lambda_infer: Option<f64>,
    /// NMS IoU [default: 0.7].
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Proposals kept per scene [default: 1000].
    #[arg(long)]
    pub max_out: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated blend weights.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambda_cls: Vec<f64>,
    /// Comma-separated pseudo-label budgets.
    #[arg(long, value_delimiter = ',', default_value = "30")]
    pub p_percent: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seed: Vec<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OpensetArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seed: Vec<u64>,
    /// Synthetic config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pseudo-label budget as a percentage of the original labels [default: 30].
    #[arg(long)]
    pub p_percent: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}
