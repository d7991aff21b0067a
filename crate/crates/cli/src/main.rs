//! `mie`: command-line driver for attribution, intervention sweeps, OV
//! readouts, dataset transforms and toy-model training.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mie_core::MieError;

/// Exit codes, one per error category.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONTRACT: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const VALIDATION: u8 = 6;
    pub const IO: u8 = 7;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(MieError),
    /// A check ran and found discrepancies.
    Check(String),
}

impl From<MieError> for CliError {
    fn from(e: MieError) -> Self {
        CliError::Engine(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Check(_) => exit::VALIDATION,
            CliError::Engine(e) => match e.category() {
                "contract" => exit::CONTRACT,
                "numerical" => exit::NUMERICAL,
                "format" => exit::FORMAT,
                "validation" => exit::VALIDATION,
                _ => exit::IO,
            },
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "validation",
            CliError::Engine(e) => e.category(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Engine(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mie", version, about = "Attention-head attribution and intervention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Scale attention entries over an α grid and count outcome labels.
    Sweep(SweepArgs),
    /// Per-head Δ_cofa mean and spread over a dataset.
    Attribute(AttributeArgs),
    /// Singular directions of a head's OV circuit, read out as tokens.
    Svd(SvdArgs),
    /// Induction scores on repeated random sequences.
    Induction(InductionArgs),
    /// Δ_cofa per head and category.
    Heatmap(HeatmapArgs),
    /// α sweeps on randomly drawn replacement heads.
    Baseline(BaselineArgs),
    /// Dataset transforms and generators.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a toy model from a JSON config.
    Train(TrainArgs),
    /// Validate a checkpoint and optionally compare it with a reference fixture.
    ConvertCheck(ConvertCheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelInput {
    /// Engine-format checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// `byte`, `toy`, or a GPT-2 style vocab.json (with --merges).
    #[arg(long, default_value = "toy")]
    pub vocab: String,
    #[arg(long)]
    pub merges: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnModeArg {
    Frozen,
    Raw,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    SinglePair,
    AllKeys,
}

#[derive(Args, Debug, Clone)]
pub struct SpecArgs {
    /// Heads to intervene on together, e.g. `L0H3,L1H2`.
    #[arg(long, conflicts_with = "specs")]
    pub heads: Option<String>,
    /// Full intervention specs, e.g. `L0H3:alpha=1:q=last:k=cofa:mode=single_pair`.
    /// The α in each spec is replaced by the sweep values.
    #[arg(long)]
    pub specs: Option<String>,
    #[arg(long, default_value = "last")]
    pub query: String,
    #[arg(long, default_value = "cofa")]
    pub key: String,
    #[arg(long, value_enum, default_value = "single-pair")]
    pub mode: ModeArg,
    #[arg(long, default_value = "0,1,2,5,10,100")]
    pub alphas: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Keep per-entry outcomes in the JSON output.
    #[arg(long)]
    pub keep_outcomes: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "frozen")]
    pub ln_mode: LnModeArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SvdArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub head: String,
    /// Tokens listed per direction.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Directions reported; every direction up to d_head when omitted.
    #[arg(long)]
    pub vectors: Option<usize>,
    #[arg(long)]
    pub fold_ln_gain: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct InductionArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Length of the repeated half.
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Sample tokens from the toy world's words instead of the whole vocabulary.
    #[arg(long)]
    pub toy_pool: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldArg {
    Subject,
    Answer,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "answer")]
    pub field: FieldArg,
    /// Comma-separated; every category present when omitted.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    /// Entries per category; the smallest category size when omitted.
    #[arg(long)]
    pub truncate_to: Option<usize>,
    #[arg(long, value_enum, default_value = "frozen")]
    pub ln_mode: LnModeArg,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub model: ModelInput,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Number of replacement draws; draw i uses seed + i.
    #[arg(long, default_value_t = 4)]
    pub seeds: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Replace the premise of every prompt.
    Premise {
        #[command(flatten)]
        io: DatasetIo,
        #[arg(long)]
        premise: String,
    },
    /// Rewrite prompts into a two-sentence structure.
    Structure {
        #[command(flatten)]
        io: DatasetIo,
        #[arg(long, default_value = "normal")]
        first: String,
        #[arg(long, default_value = "normal")]
        second: String,
    },
    /// Split by whether the subject contains the true target; writes
    /// `hinted.json` and `no_hint.json` into `--out`.
    SplitHinted {
        #[command(flatten)]
        io: DatasetIo,
    },
    /// Put the true target in the object slot.
    SubstituteFact {
        #[command(flatten)]
        io: DatasetIo,
    },
    /// Keep entries matching the given categories, optionally subsampled.
    Filter {
        #[command(flatten)]
        io: DatasetIo,
        #[arg(long)]
        subject_category: Option<String>,
        #[arg(long)]
        answer_category: Option<String>,
        #[arg(long)]
        truncate_to: Option<usize>,
        #[arg(long)]
        seed: u64,
    },
    /// Generate redefinition prompts over the toy world.
    MakeToy {
        #[arg(long, default_value_t = 24)]
        n_facts: usize,
        /// Defaults to one entry per fact.
        #[arg(long)]
        entries: Option<usize>,
        /// Fact table seed; must match the training config's `world_seed`.
        #[arg(long)]
        world_seed: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct DatasetIo {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss is printed every this many steps; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct ConvertCheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `byte`, `toy`, or a vocab.json (with --merges); tokenization is
    /// checked only when given.
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub merges: Option<PathBuf>,
    /// Reference token ids and greedy predictions.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var("MIE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("MIE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = threads_from_env()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    commands::dispatch(cli.command, threads)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.code())
        }
    }
}
