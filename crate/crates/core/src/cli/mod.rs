//! Command-line front end: one subcommand per pipeline stage, each writing
//! its outputs plus a copy of the resolved configuration into one directory.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::SourceDb;
use crate::training::CheckpointPolicy;

pub use commands::{cmd_eval, cmd_optimize, cmd_phantom, cmd_prepare, cmd_report, cmd_train};
pub use commands::{
    load_data, split_for, RunSummary, EVALUATION_FILE, HISTORY_FILE, LEDGER_FILE, PREPARED_FILE, SUMMARY_FILE,
};
pub use config::{
    write_run_config, DataRoot, RunConfig, DEFAULT_INPUT_SIZE, DEFAULT_N_TRIALS, OUT_ENV, RUN_CONFIG_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "lungseg",
    version,
    about = "U-net lung segmentation with TPE hyperparameter search"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset (a test fixture, not clinical data).
    Phantom(PhantomArgs),
    /// Resize and equalize datasets into a reusable directory.
    Prepare(PrepareArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Run a TPE hyperparameter study.
    Optimize(OptimizeArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Render metric tables, best-trial lists and loss plots.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyArg {
    Best,
    Last,
}

impl From<PolicyArg> for CheckpointPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Best => CheckpointPolicy::BestValidation,
            PolicyArg::Last => CheckpointPolicy::Last,
        }
    }
}

/// Flags that override [`RunConfig`] fields.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct CommonArgs {
    /// Dataset directory, optionally re-tagged: `PATH` or `SOURCE=PATH`. Repeatable.
    #[arg(long = "data", value_name = "[SOURCE=]PATH")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub data: Vec<DataRoot>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square model input size; must be divisible by 2^N.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output root (overrides LUNGSEG_OUT and the config file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Database the test split is drawn from.
    #[arg(long, value_parser = parse_source)]
    pub test_source: Option<SourceDb>,
    /// Train without augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Which epoch's parameters to keep.
    #[arg(long, value_enum)]
    pub keep: Option<PolicyArg>,
}

fn parse_source(s: &str) -> Result<SourceDb, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    pub size: usize,
    /// Fraction of samples with severe opacities.
    #[arg(long, default_value_t = 0.2)]
    pub severe: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tag samples with this source instead of PHANTOM (ids get a prefix).
    #[arg(long, value_parser = parse_source)]
    pub tag: Option<SourceDb>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Destination; defaults to `<out>/prepared_<size>`.
    #[arg(long)]
    pub dest: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(id = "model", required = true, multiple = false, args = ["preset", "hp"])]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `baseline` or `optimized`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Explicit hyperparameters, e.g. `B=4,R=0.001,OP=2,N=4,T=4,F=40,D=0.016,BN=1`.
    #[arg(long)]
    pub hp: Option<String>,
    /// Run directory name; defaults to `train_<preset|custom>_seed<seed>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Total number of trials in the ledger when the study ends.
    #[arg(long)]
    pub n_trials: Option<usize>,
    /// Continue the study recorded in this ledger.
    #[arg(long, value_name = "LEDGER", conflicts_with = "name")]
    pub resume: Option<PathBuf>,
    /// Study directory name; defaults to `study_seed<seed>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory written by `train` or `optimize`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate every sample instead of the test split.
    #[arg(long)]
    pub all: bool,
    /// Output directory name; defaults to `eval_<checkpoint run>`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluation file from `train` or `eval`: `PATH` or `MODEL=PATH`. Repeatable.
    #[arg(long = "eval", value_name = "[MODEL=]PATH")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub evals: Vec<String>,
    /// Trial ledger from `optimize`.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    pub name: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Joins an error chain into one line, dropping causes whose text the
/// previous message already ends with.
pub fn one_line(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out.replace('\n', " ")
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_logging(cli.verbose);
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Phantom(a) => cmd_phantom(cfg, &a),
        Command::Prepare(a) => cmd_prepare(cfg, &a).map(drop),
        Command::Train(a) => cmd_train(cfg, &a).map(drop),
        Command::Optimize(a) => cmd_optimize(cfg, &a).map(drop),
        Command::Eval(a) => cmd_eval(cfg, &a).map(drop),
        Command::Report(a) => cmd_report(cfg, &a).map(drop),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let summary: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty() && !l.starts_with("Usage:"))
                .collect();
            eprintln!("{}", summary.join(" "));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn train_needs_exactly_one_model_source() {
        assert!(Cli::try_parse_from(["lungseg", "train"]).is_err());
        assert!(Cli::try_parse_from(["lungseg", "train", "--preset", "baseline", "--hp", "B=4"]).is_err());
        assert!(Cli::try_parse_from(["lungseg", "train", "--preset", "baseline"]).is_ok());
    }

    #[test]
    fn data_flags_accumulate() {
        let cli = Cli::try_parse_from(["lungseg", "optimize", "--data", "JSRT=a", "--data", "b"]).unwrap();
        let Command::Optimize(a) = cli.command else { panic!() };
        assert_eq!(a.common.data.len(), 2);
        assert_eq!(a.common.data[0].source, Some(SourceDb::Jsrt));
        assert_eq!(a.n_trials, None);
    }

    #[test]
    fn io_error_chain_is_not_repeated() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let err = anyhow::Error::new(crate::Error::Io {
            path: "x.csv".into(),
            source: io,
        });
        assert_eq!(one_line(&err), "x.csv: gone");
        let wrapped = err.context("loading ledger");
        assert_eq!(one_line(&wrapped), "loading ledger: x.csv: gone");
    }
}
