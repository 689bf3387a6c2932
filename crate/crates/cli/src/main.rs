//! `delq`: solve, classify, verify and simulate delayed stochastic LQ problems.

mod commands;
mod format;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use delq_core::DelqError;

#[derive(Parser, Debug)]
#[command(name = "delq", version, about = "Stochastic LQ control with transmission delay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Output format.
    #[arg(long, value_enum, default_value = "human", global = true)]
    pub format: OutputFormat,

    /// Relative singular-value cutoff of the pseudo-inverse.
    #[arg(long, default_value_t = delq_core::linalg::DEFAULT_PINV_REL_TOL, global = true)]
    pub pinv_tol: f64,

    /// Relative tolerance of semidefiniteness and range tests.
    #[arg(long, default_value_t = delq_core::linalg::DEFAULT_PSD_TOL, global = true)]
    pub psd_tol: f64,

    /// Tolerance of the LMEI membership test.
    #[arg(long, default_value_t = delq_core::linalg::DEFAULT_FEASIBILITY_TOL, global = true)]
    pub feas_tol: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Human,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    /// Problem file (JSON).
    #[arg(long)]
    pub problem: PathBuf,

    /// Initial time.
    #[arg(long, default_value_t = 0)]
    pub t: usize,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct SolutionSource {
    /// Problem file; the recursion is solved on the fly.
    #[arg(long)]
    pub problem: Option<PathBuf>,

    /// Solution file written by `solve --output`.
    #[arg(long)]
    pub solution: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the Riccati-like recursion and classify solvability.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Write the solution as JSON to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Optimal value V(k, x).
    Value {
        #[command(flatten)]
        source: SolutionSource,
        /// Initial time of the problem (ignored with --solution).
        #[arg(long, default_value_t = 0)]
        t: usize,
        /// Evaluation time; defaults to the initial time.
        #[arg(long)]
        k: Option<usize>,
        /// State, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
    },
    /// Feedback gains K_k.
    Gains {
        #[command(flatten)]
        source: SolutionSource,
        #[arg(long, default_value_t = 0)]
        t: usize,
    },
    /// Brute-force minimisation over all admissible controls on the scenario tree.
    Oracle {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        /// Largest accepted relative gap between oracle and Riccati values.
        #[arg(long, default_value_t = 1e-8)]
        match_tol: f64,
    },
    /// Evaluate a policy exactly on the tree or by Monte Carlo.
    Simulate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_hyphen_values = true)]
        x: String,
        #[arg(long, value_enum, default_value = "monte-carlo")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "optimal")]
        policy: PolicyChoice,
        #[arg(long, value_enum, default_value = "rademacher")]
        noise: Noise,
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Membership test and construction for the matrix equality-inequality system.
    Lmei {
        #[command(subcommand)]
        action: LmeiAction,
    },
    /// Built-in examples.
    Example {
        #[command(subcommand)]
        which: Example,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Exact,
    MonteCarlo,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    Optimal,
    Zero,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    Rademacher,
    Gaussian,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct CandidateSource {
    /// Candidate file; a solution file is accepted as well.
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// The all-zero candidate.
    #[arg(long)]
    pub zero: bool,
    /// The Riccati solution of the problem itself.
    #[arg(long)]
    pub certificate: bool,
}

#[derive(Subcommand, Debug)]
pub enum LmeiAction {
    /// Evaluate every constraint on a candidate.
    Check {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        candidate: CandidateSource,
    },
    /// Build a constrained Riccati solution from a feasible candidate.
    Construct {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        candidate: CandidateSource,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum Example {
    /// The two-dimensional four-step example with delay 2.
    Paper,
}

/// Failure of a command, mapped to the process exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(DelqError),
    /// Refusal on an unsolvable instance or an infeasible candidate.
    Refused(String),
    /// Two independent computations disagree.
    Mismatch(String),
}

impl From<DelqError> for CliError {
    fn from(e: DelqError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Refused(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Core(e) => match e {
                DelqError::Json(_) => 1,
                DelqError::Validation(_)
                | DelqError::InvalidInput(_)
                | DelqError::DimensionMismatch { .. }
                | DelqError::Resource(_)
                | DelqError::Measurability(_) => 2,
                DelqError::Unsolvable(_) | DelqError::Infeasible(_) => 3,
                DelqError::NonFinite(_) | DelqError::Inconsistent(_) | DelqError::Undefined { .. } => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => write!(f, "{s}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Refused(s) => write!(f, "refused: {s}"),
            CliError::Mismatch(s) => write!(f, "mismatch: {s}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
