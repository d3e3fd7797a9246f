//! The `grm` command line: training, evaluation, ablations, benchmarks and
//! diagnostics for the GRM tracker.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grm_core::relation::RelationMode;
use grm_tracker::scenario::Suite;

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "grm", version, about = "Generalized relation modeling tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and per-epoch loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out sequences; prints metrics JSON.
    Eval(EvalArgs),
    /// Time fused masked attention against three separate attention calls.
    BenchMask(BenchArgs),
    /// Write per-layer division JSON and PGM maps for one tracked frame.
    DumpDivisions(DumpArgs),
    /// Finite-difference check of every gradient of a tiny model.
    GradCheck(GradCheckArgs),
    /// Train and evaluate the relation-mode ablation variants; prints CSV.
    Ablate(AblateArgs),
    /// Print the default configuration with every key documented.
    ConfigReference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    #[value(name = "adaptive")]
    Adaptive,
    #[value(name = "two_stream")]
    TwoStream,
    #[value(name = "one_stream")]
    OneStream,
}

impl From<Policy> for RelationMode {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Adaptive => RelationMode::Adaptive,
            Policy::TwoStream => RelationMode::TwoStream,
            Policy::OneStream => RelationMode::OneStream,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Easy,
    Distractor,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Easy => Suite::Easy,
            SuiteArg::Distractor => Suite::Distractor,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides the config seed (and GRM_SEED).
    #[arg(long, env = "GRM_SEED")]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `model.relation`.
    #[arg(long)]
    pub policy: Option<Policy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stub {
    /// Reports the ground-truth box.
    Oracle,
    /// Reports a fixed box outside the canvas.
    Fixed,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(required_unless_present = "stub")]
    pub checkpoint: Option<PathBuf>,
    /// Run configuration supplying the `eval` and `data.crop` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub suite: Option<SuiteArg>,
    /// Replace the model by a harness self-test tracker.
    #[arg(long)]
    pub stub: Option<Stub>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DivisionArg {
    Random,
    #[value(name = "all_A")]
    AllA,
    #[value(name = "all_S")]
    AllS,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "n-z", alias = "n_z", default_value_t = 64)]
    pub n_z: usize,
    #[arg(long = "n-x", alias = "n_x", default_value_t = 256)]
    pub n_x: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 768)]
    pub c: usize,
    /// Timed forward passes per variant, after one untimed warm-up.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value = "random")]
    pub division: DivisionArg,
    #[arg(long, env = "GRM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    pub checkpoint: PathBuf,
    /// Scenario JSON file; defaults to a held-out sequence of `--suite`.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "easy")]
    pub suite: SuiteArg,
    /// Index of the held-out sequence when no scenario file is given.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Frame whose divisions are written; frames before it are tracked.
    #[arg(long, default_value_t = 1)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, env = "GRM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "tiny")]
    pub scale: Scale,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Scales the backward rule of the named op; harness self-test only.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Tiny,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    #[arg(long, env = "GRM_SEED")]
    pub seed: Option<u64>,
    /// Comma-separated labels overriding `ablate.variants`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Directory for per-variant checkpoints and loss logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one command, writing its primary output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train::run(&a, out),
        Command::Eval(a) => commands::eval::run(&a, out),
        Command::BenchMask(a) => commands::bench::run(&a, out),
        Command::DumpDivisions(a) => commands::dump::run(&a, out),
        Command::GradCheck(a) => commands::gradcheck::run(&a, out),
        Command::Ablate(a) => commands::ablate::run(&a, out),
        Command::ConfigReference => {
            write!(out, "{}", RunConfig::reference()).map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
