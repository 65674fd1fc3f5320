use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use viewsift_core::protocol::{LevelName, Profile};
use viewsift_core::scoring::{AttentionMode, Probe};

#[derive(Debug, Parser)]
#[command(
    name = "viewsift",
    version,
    about = "Score, filter and evaluate context views of a multi-view set"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the anchor-by-view score matrix.
    Score(ScoreArgs),
    /// Threshold one anchor's scores and write the kept set as a work order.
    Select(SelectArgs),
    /// Clean-minus-distractor score gap per layer.
    Probe(ProbeArgs),
    /// Pose and depth metrics of prediction manifests against ground truth.
    Eval(EvalArgs),
    /// Run the randomised distractor protocol.
    Trials(TrialsArgs),
    /// Generate a synthetic clean/distractor set with known answers.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Attention,
    Feature,
    Fused,
}

impl From<ProbeArg> for Probe {
    fn from(p: ProbeArg) -> Self {
        match p {
            ProbeArg::Attention => Probe::Attention,
            ProbeArg::Feature => Probe::Feature,
            ProbeArg::Fused => Probe::Fused,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Raw,
    Minmax,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Raw => AttentionMode::RawMean,
            ModeArg::Minmax => AttentionMode::MinmaxNormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Default,
    Eth3d,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Default => Profile::Default,
            ProfileArg::Eth3d => Profile::Eth3d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Small,
    Medium,
    Large,
}

impl From<LevelArg> for LevelName {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Small => LevelName::Small,
            LevelArg::Medium => LevelName::Medium,
            LevelArg::Large => LevelName::Large,
        }
    }
}

/// Probe selection shared by the scoring commands.
#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value = "feature")]
    pub probe: ProbeArg,
    /// Attention reduction; ignored by the feature probe.
    #[arg(long, value_enum, default_value = "minmax")]
    pub mode: ModeArg,
    /// Attention weight of the fused probe, in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Restrict rows to these anchors (repeatable). Default: every view.
    #[arg(long)]
    pub anchor: Vec<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Keep threshold. Default depends on the probe.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Default: the first view of the manifest.
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// One manifest per layer (repeatable), all over the same views.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "feature")]
    pub probe: ProbeArg,
    #[arg(long, value_enum, default_value = "minmax")]
    pub mode: ModeArg,
    /// Default: the first clean view of each manifest.
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest carrying ground-truth poses and depths.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prediction manifests (repeatable).
    #[arg(long, required = true)]
    pub predictions: Vec<PathBuf>,
    /// Label written to the method column.
    #[arg(long, default_value = "predictions")]
    pub method: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrialsArgs {
    /// JSON run description. Flags given alongside it override its fields.
    #[arg(long, required_unless_present = "manifest")]
    pub run_spec: Option<PathBuf>,
    /// Pool manifest with clean/distractor labels.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Noise levels to run (repeatable). Default: all.
    #[arg(long, value_enum)]
    pub level: Vec<LevelArg>,
    /// Trials per level.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Base seed; trial t uses seed + t.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub probe: Option<ProbeArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    pub clean: usize,
    #[arg(long, default_value_t = 10)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also attach ground truth and write a matching prediction manifest.
    #[arg(long)]
    pub ground_truth: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}
