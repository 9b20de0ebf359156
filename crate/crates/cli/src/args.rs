use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "svo-lc", version, about = "Intention-aware lane-change toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OutputArgs {
    /// Directory that receives the outputs and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// NGSIM trajectories to labeled per-frame samples and an event report.
    Label(LabelArgs),
    /// Fit an intention model from labeled samples.
    Fit(FitArgs),
    /// Posterior for a single evidence row.
    Infer(InferArgs),
    /// Train a DQN or DQN-YI agent.
    Train(TrainArgs),
    /// Greedy evaluation of a trained network.
    Eval(EvalArgs),
    /// One greedy episode as a per-frame trajectory CSV.
    Rollout(RolloutArgs),
    /// Scripted yield/pass episodes to labeled samples.
    Synth(SynthArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LabelArgs {
    /// NGSIM-format trajectory CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Pipeline config (schema svo-lc/pipeline-config@1).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Labeled samples CSV, as written by `label` or `synth`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Discretization config (schema svo-lc/discretization@1).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// TV SVO angle, degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub svo: f64,
    /// Relative acceleration (AV minus TV), m/s².
    #[arg(long, allow_hyphen_values = true)]
    pub ra: f64,
    /// Relative velocity, m/s.
    #[arg(long, allow_hyphen_values = true)]
    pub rv: f64,
    /// Relative longitudinal distance, m.
    #[arg(long, allow_hyphen_values = true)]
    pub rd: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agent {
    Dqn,
    DqnYi,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub agent: Agent,
    /// Scenario config; the built-in default scenario when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Intention model, required for dqn-yi.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Overrides the training config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the training config's episode count.
    #[arg(long)]
    pub episodes: Option<u32>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Intention model, required when the network takes p_yield.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub episodes: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for episode fan-out. Metrics do not depend on it.
    #[arg(long, default_value_t = 1)]
    #[serde(default = "one")]
    pub parallel: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RolloutArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Synth config (schema svo-lc/synth-config@1).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// manifest.json of an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

impl Command {
    pub fn output(&self) -> &OutputArgs {
        match self {
            Command::Label(a) => &a.output,
            Command::Fit(a) => &a.output,
            Command::Infer(a) => &a.output,
            Command::Train(a) => &a.output,
            Command::Eval(a) => &a.output,
            Command::Rollout(a) => &a.output,
            Command::Synth(a) => &a.output,
            Command::Replay(a) => &a.output,
        }
    }

    pub fn output_mut(&mut self) -> &mut OutputArgs {
        match self {
            Command::Label(a) => &mut a.output,
            Command::Fit(a) => &mut a.output,
            Command::Infer(a) => &mut a.output,
            Command::Train(a) => &mut a.output,
            Command::Eval(a) => &mut a.output,
            Command::Rollout(a) => &mut a.output,
            Command::Synth(a) => &mut a.output,
            Command::Replay(a) => &mut a.output,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Label(_) => "label",
            Command::Fit(_) => "fit",
            Command::Infer(_) => "infer",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Rollout(_) => "rollout",
            Command::Synth(_) => "synth",
            Command::Replay(_) => "replay",
        }
    }
}
