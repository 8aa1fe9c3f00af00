//! `dgd-lab`: config-driven experiment runner for multi-domain identity
//! feature learning with impact-guided dropout.
//!
//! Subcommands wrap the library layers: `generate` emits datasets and
//! retrieval protocols, `pipeline` runs the staged training procedure,
//! `impact` scores neurons against a checkpoint, `eval` ranks protocols
//! under a dropout policy, and `report` rebuilds tables from stored stage
//! reports. Everything an invocation writes is a pure function of the
//! config document and the seeds, so artifacts diff cleanly across reruns.
//!
//! Exit codes: 0 success, 2 configuration or usage errors, 3 runtime
//! failures. `DGD_LAB_LOG` controls log verbosity (`error` by default).

mod commands;
mod manifest;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dgd_core::config::ExperimentConfig;
use dgd_core::config::StageKind;
use dgd_core::error::Error;
use dgd_core::impact::ImpactMethod;

#[derive(Parser)]
#[command(name = "dgd-lab", version, about = "Multi-domain training experiments with impact-guided dropout", max_term_width = 100)]
struct Cli {
    /// Experiment config file (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory artifacts are written to.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Base RNG seed; defaults to the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run this many consecutive seeds starting at the base seed, each into
    /// seed_<s>/, and aggregate their summaries.
    #[arg(long, global = true, value_name = "N")]
    seeds: Option<u32>,

    /// Cap on worker threads for data-parallel sections.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Comma-separated subset of stages to run (e.g. jstl,jstl_dgd).
    #[arg(long, global = true, value_delimiter = ',', value_name = "STAGES")]
    stages: Option<Vec<String>>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config's synthetic datasets and retrieval protocols.
    Generate,
    /// Run the staged training pipeline and write reports and summaries.
    Pipeline,
    /// Score per-neuron impact for a checkpoint on the config's data.
    Impact {
        /// Checkpoint holding the encoder and its merged-label head.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Scoring method; `both` adds an exact-vs-taylor comparison.
        #[arg(long, value_enum, default_value_t = MethodArg::Taylor)]
        method: MethodArg,
    },
    /// Rank each protocol's gallery against its probes and report CMC.
    Eval {
        /// Checkpoint providing the feature encoder.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Protocol file written by `generate`; repeat for several domains.
        #[arg(long = "protocol", required = true, value_name = "FILE")]
        protocols: Vec<PathBuf>,
        /// Dropout policy applied at feature extraction.
        #[arg(long, value_enum, default_value_t = PolicyArg::None)]
        policy: PolicyArg,
        /// Drop rate for --policy standard.
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        /// Impact score file for guided policies; repeat per domain.
        #[arg(long = "scores", value_name = "FILE")]
        scores: Vec<PathBuf>,
        /// Sigmoid temperature for --policy stochastic; omitted selects one
        /// so the highest-impact neuron keeps probability 0.9.
        #[arg(long)]
        temperature: Option<f64>,
        /// Highest CMC rank to report.
        #[arg(long, default_value_t = 10)]
        rank: usize,
    },
    /// Rebuild summary tables and plot CSVs from stored stage reports.
    Report,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Exact,
    Taylor,
    Both,
}

impl MethodArg {
    fn single(self) -> Option<ImpactMethod> {
        match self {
            MethodArg::Exact => Some(ImpactMethod::Exact),
            MethodArg::Taylor => Some(ImpactMethod::Taylor),
            MethodArg::Both => None,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Identity: features pass through unchanged.
    None,
    /// Standard dropout test-time identity at the given rate.
    Standard,
    /// Zero neurons whose impact score is non-positive.
    Deterministic,
    /// Scale neurons by their sigmoid keep probability.
    Stochastic,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("DGD_LAB_LOG", "error").write_style("DGD_LAB_LOG_STYLE"),
    )
    .init();
    let cli = Cli::parse();
    dgd_core::par::init_thread_pool(cli.jobs);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Generate => {
            let exp = load_config(&cli)?;
            commands::generate::run(&exp, &require_out(&cli)?, cli.seed.unwrap_or(exp.seed))
        }
        Command::Pipeline => {
            let exp = load_config(&cli)?;
            let args = commands::pipeline::Args {
                out: require_out(&cli)?,
                base_seed: cli.seed.unwrap_or(exp.seed),
                seeds: cli.seeds,
                stages: parse_stages(cli.stages.as_deref())?,
            };
            commands::pipeline::run(&exp, &args)
        }
        Command::Impact { checkpoint, method } => {
            let exp = load_config(&cli)?;
            commands::impact::run(
                &exp,
                &require_out(&cli)?,
                cli.seed.unwrap_or(exp.seed),
                checkpoint,
                *method,
            )
        }
        Command::Eval { checkpoint, protocols, policy, rate, scores, temperature, rank } => {
            let args = commands::eval::Args {
                checkpoint,
                protocols,
                policy: *policy,
                rate: *rate,
                scores,
                temperature: *temperature,
                max_rank: *rank,
            };
            commands::eval::run(&require_out(&cli)?, &args)
        }
        Command::Report => commands::report::run(&require_out(&cli)?),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <FILE>".into()))?;
    ExperimentConfig::load(path)
}

fn require_out(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out.clone().ok_or_else(|| Error::Config("this command needs --out <DIR>".into()))
}

fn parse_stages(names: Option<&[String]>) -> Result<Option<Vec<StageKind>>, Error> {
    names
        .map(|list| list.iter().map(|n| StageKind::parse(n)).collect::<Result<Vec<_>, _>>())
        .transpose()
}
