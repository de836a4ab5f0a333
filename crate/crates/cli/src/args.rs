use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Contrastive predictive coding for speech: data, pretraining, probing and evaluation.
#[derive(Debug, Parser)]
#[command(name = "cpcx", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, env = "CPCX_THREADS", default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic aligned corpus.
    #[command(args_override_self = true)]
    SynthData(SynthArgs),
    /// Assign speakers to train/dev/test.
    #[command(args_override_self = true)]
    MakeSplits(SplitArgs),
    /// Pretrain a model (contrastive or supervised).
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Train a linear CTC phoneme probe and report PER.
    #[command(args_override_self = true)]
    Probe(ProbeArgs),
    /// Score ABX phone discriminability.
    #[command(args_override_self = true)]
    EvalAbx(AbxArgs),
    /// Write one feature file per utterance.
    #[command(args_override_self = true)]
    Extract(ExtractArgs),
    /// Run the double-precision finite-difference gradient suite.
    #[command(args_override_self = true)]
    GradCheck(GradArgs),
    /// Pretrain every predictor kind under one seed and compare.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::MakeSplits(_) => "make-splits",
            Command::Pretrain(_) => "pretrain",
            Command::Probe(_) => "probe",
            Command::EvalAbx(_) => "eval-abx",
            Command::Extract(_) => "extract",
            Command::GradCheck(_) => "grad-check",
            Command::Ablate(_) => "ablate",
        }
    }
}

/// `key=value` file whose entries act as flags; explicit flags win.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Key=value file of flag values; explicit flags win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 60)]
    pub utterances: usize,
    /// Minimum utterance length in frames.
    #[arg(long, default_value_t = 500)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 5)]
    pub min_unit_frames: usize,
    #[arg(long, default_value_t = 10)]
    pub max_unit_frames: usize,
    #[arg(long, default_value_t = 20.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output manifest (default: rewrite the input in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train, dev and test weights over speakers.
    #[arg(long, default_value = "8,1,1")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Encoder channels and context width.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Prediction horizon K.
    #[arg(long, default_value_t = 12)]
    pub horizon: usize,
    /// lstm or gru.
    #[arg(long, default_value = "lstm")]
    pub recurrence: String,
    /// channel or none.
    #[arg(long, default_value = "channel")]
    pub norm: String,
    /// Transformer dropout rate.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Transformer attention heads.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// One transformer trunk per horizon instead of a shared one.
    #[arg(long)]
    pub separate_trunks: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Window length in samples.
    #[arg(long, default_value_t = 20480)]
    pub window: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Negatives per prediction.
    #[arg(long, default_value_t = 128)]
    pub negatives: usize,
    /// One negative list per position, shared across horizons.
    #[arg(long)]
    pub shared_negatives: bool,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    /// Global gradient norm limit.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// Steps between intermediate checkpoints (0: none).
    #[arg(long, default_value_t = 500)]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest split to train on.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// cpc or supervised.
    #[arg(long, default_value = "cpc")]
    pub mode: String,
    /// Continue from this checkpoint; only --steps is taken from the flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// linear, ffd, conv8 or transformer.
    #[arg(long, default_value = "transformer")]
    pub predictor: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// frozen, finetune or both (finetune starts from the frozen probe).
    #[arg(long, default_value = "frozen")]
    pub mode: String,
    /// Frames concatenated per probe input.
    #[arg(long, default_value_t = 8)]
    pub stack: usize,
    /// Hop between stacked blocks.
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    /// Utterances per update.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Probe learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Encoder and context learning rate in finetune mode.
    #[arg(long, default_value_t = 1e-4)]
    pub finetune_lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Steps between dev evaluations.
    #[arg(long, default_value_t = 100)]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the probe checkpoints and PER table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AbxArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose aligned segments are scored (train, dev, test or all).
    #[arg(long, default_value = "all")]
    pub split: String,
    /// within, across or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[command(flatten)]
    pub abx: AbxFlags,
    /// Seed of the triplet subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for reports and the segment list.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AbxFlags {
    /// Triplets sampled per cell (0: all).
    #[arg(long, default_value_t = 5000)]
    pub cap: usize,
    /// pairs-then-speakers or speakers-then-pairs.
    #[arg(long, default_value = "pairs-then-speakers")]
    pub aggregation: String,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Pretrained model checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// train, dev, test or all.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// context (z) or encoder.
    #[arg(long, default_value = "context")]
    pub layer: String,
}

#[derive(Debug, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Manifest file, or a directory holding manifest.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest split to pretrain on.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Split scored with ABX (train, dev, test or all).
    #[arg(long, default_value = "all")]
    pub eval_split: String,
    /// Comma-separated predictor kinds.
    #[arg(long, default_value = "linear,ffd,conv8,transformer")]
    pub predictors: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub abx: AbxFlags,
}
