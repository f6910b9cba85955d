//! `logicache` command-line front end.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("LOGICACHE_GIT_REV"), ")");

#[derive(Debug, Parser)]
#[command(name = "logicache", version = VERSION, about = "Sequence-to-logical-form parser with a copy/cache decoder and influence-based data selection")]
pub struct Cli {
    /// Directory under which each invocation creates its run directory.
    #[arg(long, global = true, env = "LOGICACHE_RUN_ROOT", default_value = "runs")]
    pub run_root: PathBuf,

    /// Log filter (error, warn, info, debug, trace). RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Standardize and split a corpus TSV.
    Preprocess(PreprocessCmd),
    /// Train a parser; evaluates on the held-out split when there is one.
    Train(TrainCmd),
    /// Score a trained model on a corpus.
    Eval(EvalCmd),
    /// Greedy-decode utterances with a trained model.
    Decode(DecodeCmd),
    /// Finite-difference check of the parser gradients.
    Gradcheck(GradcheckCmd),
    /// Rank source-domain examples by influence on the target domain.
    Influence(InfluenceCmd),
    /// Retrain with growing prefixes of influential and random selections.
    Sweep(SweepCmd),
}

#[derive(Debug, Args, Clone)]
pub struct PreprocessArgs {
    /// Rename logical-form variables by order of first occurrence.
    #[arg(long)]
    pub debruijn: bool,
    /// Predicate-to-word table (one `predicate<TAB>word` per line); enables stripping.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Strip logic tokens before variable renaming instead of after.
    #[arg(long)]
    pub strip_first: bool,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden size.
    #[arg(long, visible_alias = "d")]
    pub hidden: Option<String>,
    #[arg(long)]
    pub embed: Option<String>,
    /// Cache function: off, f1 .. f6.
    #[arg(long)]
    pub cache_fn: Option<String>,
    /// Gate the whole f6 cache output as well as its internal mix (true/false).
    #[arg(long)]
    pub double_gate: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<String>,
    /// Per-epoch learning-rate multiplier.
    #[arg(long)]
    pub lr_decay: Option<String>,
    /// Gradient-norm clip, or `off`.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub max_len: Option<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessCmd {
    /// Corpus TSV: `utterance<TAB>logical form` per line.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub pre: PreprocessArgs,
    /// `standard:geoquery` or `frac:<f>,seed:<n>`.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Training corpus TSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out corpus TSV. Mutually exclusive with --split.
    #[arg(long, conflicts_with = "split")]
    pub test: Option<PathBuf>,
    /// Split --data into train/test: `standard:geoquery` or `frac:<f>,seed:<n>`.
    #[arg(long)]
    pub split: Option<String>,
    /// Corpus tag recorded in reports (GEOQUERY, GEOQUERY-S, OVERNIGHT:<domain>, ...).
    #[arg(long, default_value = "GEOQUERY")]
    pub provenance: String,
    #[command(flatten)]
    pub pre: PreprocessArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Run directory of a `train` invocation.
    #[arg(long)]
    pub model: PathBuf,
    /// Weights to load instead of final.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "GEOQUERY")]
    pub provenance: String,
    #[command(flatten)]
    pub pre: PreprocessArgs,
}

#[derive(Debug, Args)]
pub struct DecodeCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// File of utterances, one per line; anything after a tab is ignored.
    #[arg(long, conflicts_with = "utterance")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Utterance tokens to decode.
    #[arg(required_unless_present = "input")]
    pub utterance: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    /// Hidden size.
    #[arg(long, visible_alias = "hidden", default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub embed: usize,
    #[arg(long, default_value = "f1")]
    pub cache_fn: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub double_gate: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Corpus whose first pair is checked; a built-in toy pair otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SelectArgs {
    /// Source-domain corpus TSV (candidates).
    #[arg(long)]
    pub source: PathBuf,
    /// Target-domain corpus TSV.
    #[arg(long)]
    pub target: PathBuf,
    /// Independent inverse-HVP repetitions.
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Examples sampled from the top-k counts.
    #[arg(long, default_value_t = 100)]
    pub sample: usize,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// exact or stochastic.
    #[arg(long, default_value = "stochastic")]
    pub hvp: String,
    /// Recursion depth of each stochastic estimate.
    #[arg(long, default_value_t = 5000)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.0)]
    pub damping: f64,
    /// Hessian scale; chosen from a curvature bound when omitted.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Independent recursions averaged per estimate.
    #[arg(long, default_value_t = 1)]
    pub averages: usize,
    /// L2 strength of the domain classifier.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct InfluenceCmd {
    #[command(flatten)]
    pub select: SelectArgs,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub select: SelectArgs,
    /// Held-out target TSV. Without it the target is split with --split.
    #[arg(long, conflicts_with = "split")]
    pub target_test: Option<PathBuf>,
    #[arg(long, default_value = "frac:0.5,seed:13")]
    pub split: String,
    /// Comma-separated prefix sizes.
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
    pub steps: Vec<usize>,
    /// Also sweep a uniformly random selection of the same size.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub random_baseline: bool,
    #[command(flatten)]
    pub pre: PreprocessArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if rundir::logging_active() {
                log::error!("{e:#}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
