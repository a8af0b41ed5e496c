use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stratplan_core::catalog::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "stratplan", version, about = "Persona-aware dialogue strategy planning")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Cb,
    P4g,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Cb => TaskKind::PriceNegotiation,
            TaskArg::P4g => TaskKind::CharityPersuasion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    /// Template utterances, rule-based judge and scripted simulators.
    #[default]
    Scripted,
    /// OpenAI-compatible endpoint from LLM_API_BASE / LLM_API_KEY.
    Remote,
}

/// Flags shared by all subcommands. Flags override the config file.
#[derive(Args, Debug, Clone)]
pub struct Global {
    #[arg(long, global = true, value_enum)]
    pub task: Option<TaskArg>,
    /// TOML config; top-level keys are training settings, `[sft]` and `[eval]` tables are optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Population manifest.
    #[arg(long, global = true)]
    pub population: Option<PathBuf>,
    /// Policy checkpoint (input for eval/serve, initialization for train).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub tom: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[arg(long, global = true)]
    pub serve_port: Option<u16>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Supervised initialization from an annotated corpus.
    Sft {
        /// JSONL corpus of (history, label) records.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Population-based REINFORCE.
    Train {
        /// Scenario file (JSON array); defaults to the task's reference scenario.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a population.
    Eval {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Evaluate the uniform random policy instead of a checkpoint.
        #[arg(long)]
        uniform: bool,
    },
    /// Intra- and inter-persona distances of strategy sequences in an episode archive.
    Analyze {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Run the live session service.
    Serve {
        /// Directory of `<id>.json` checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_sessions: usize,
        #[arg(long, default_value_t = 30)]
        idle_minutes: u64,
    },
    /// List the persona categories.
    Personas,
    /// Build a balanced population and write its manifest.
    Population {
        #[arg(long, default_value_t = 40)]
        size: usize,
        /// Use the instance range reserved for evaluation.
        #[arg(long)]
        eval: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic annotated corpus for supervised initialization.
    Corpus {
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Sft { .. } => "sft",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Serve { .. } => "serve",
            Command::Personas => "personas",
            Command::Population { .. } => "population",
            Command::Corpus { .. } => "corpus",
        }
    }
}
