//! `amjl`: generate data, pretrain the imputer, train the policy jointly,
//! and evaluate against baselines.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "amjl", version, about = "Joint measurement-policy and imputer training from missing-only data")]
struct Cli {
    /// Log verbosity: -v for info, -vv for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "NAME", value_parser = ["sin-single", "sin-double", "mnist12"])]
    pub dataset: Option<String>,
    #[arg(long, value_name = "F")]
    pub missing_rate: Option<f64>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "MODE", value_parser = ["full", "no-meta", "no-adaptation"])]
    pub ablation: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Uninform,
    Explicit,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMethodArg {
    Proposed,
    Uninform,
    Explicit,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory holding test.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Run directory holding the checkpoints.
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Candidates per terminal state for top-k error.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Number of evaluation seeds.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Sample actions instead of taking the argmax.
    #[arg(long)]
    pub stochastic: bool,
    /// Evaluate on at most this many test examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset and write train.csv / test.csv under --out.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Directory with the MNIST IDX files.
        #[arg(long, default_value = "data/mnist")]
        mnist_dir: PathBuf,
    },
    /// Pretrain the imputer on train.csv.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Run joint policy/imputer training.
    TrainJoint {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Pretrained imputer; defaults to OUT/imputer_pretrained.ckpt, pretraining if absent.
        #[arg(long, value_name = "PATH")]
        imputer: Option<PathBuf>,
    },
    /// Evaluate a trained run on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value = "proposed")]
        method: EvalMethodArg,
    },
    /// Evaluate a trained run across missing rates and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.75,0.8,0.85,0.9,0.95")]
        rates: Vec<f64>,
        /// Also evaluate the baselines at each rate.
        #[arg(long)]
        with_baselines: bool,
    },
    /// Evaluate a baseline measurement policy with a run's imputer.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum)]
        method: BaselineKind,
    },
    /// Check analytic gradients against finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Layer widths of the random network.
        #[arg(long, value_delimiter = ',', default_value = "6,8,8,4")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        nets: u64,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<amjl_core::Error> for Failure {
    fn from(e: amjl_core::Error) -> Self {
        match e {
            amjl_core::Error::InvalidArgument(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::GenData {
            common,
            n_train,
            n_test,
            mnist_dir,
        } => commands::gen_data(&common, n_train, n_test, &mnist_dir),
        Command::Pretrain { common, data } => commands::pretrain(&common, &data),
        Command::TrainJoint { common, data, imputer } => commands::train_joint(&common, &data, imputer.as_deref()),
        Command::Eval { common, eval, method } => commands::eval(&common, &eval, method),
        Command::Sweep {
            common,
            eval,
            rates,
            with_baselines,
        } => commands::sweep(&common, &eval, &rates, with_baselines),
        Command::Baseline { common, eval, method } => commands::baseline(&common, &eval, method),
        Command::GradCheck { common, dims, nets } => commands::grad_check(&common, &dims, nets),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
