mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pgbart", version, about = "Bayesian additive regression trees with a particle-Gibbs sampler")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write a run directory.
    Fit(FitArgs),
    /// Posterior mean and HDI of the response for new covariates.
    Predict(PredictArgs),
    /// Partial dependence of the response on each covariate.
    Pdp(PdpArgs),
    /// Individual conditional expectation curves.
    Ice(IceArgs),
    /// Variable importance and the pruned-model r2 curve.
    Vi(ViArgs),
    /// Per-point ESS and R-hat of the latent sum of trees.
    Diagnose(DiagnoseArgs),
    /// Generate a synthetic dataset with its noise-free truth.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Default)]
pub struct FitArgs {
    /// JSON model configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV with covariates and response; replaces the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Response column of --data.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Batch fraction, either one value or `tune,draws`.
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub tune: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long, env = "PGBART_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for chains; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Run directory.
    #[arg(long, env = "PGBART_OUT")]
    pub out: Option<PathBuf>,
    /// Keep every k-th forest snapshot.
    #[arg(long)]
    pub thin_forests: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Run directory written by `fit`.
    pub run: PathBuf,
    /// CSV with the training covariate columns.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.94)]
    pub prob: f64,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterpretArgs {
    /// Run directory written by `fit`.
    pub run: PathBuf,
    /// Forest snapshots to sample.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.94)]
    pub prob: f64,
    /// Output directory; defaults to a subdirectory of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PdpArgs {
    #[command(flatten)]
    pub common: InterpretArgs,
    /// Grid points per continuous covariate.
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    /// Covariate names; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
}

#[derive(Args, Debug)]
pub struct IceArgs {
    #[command(flatten)]
    pub common: InterpretArgs,
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    /// Observations to draw curves for.
    #[arg(long, default_value_t = 50)]
    pub rows: usize,
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ViArgs {
    #[command(flatten)]
    pub common: InterpretArgs,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Run directory written by `fit`.
    pub run: PathBuf,
    /// Use the fixed R-hat threshold instead of simulating one.
    #[arg(long)]
    pub fixed_threshold: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SimKind {
    Friedman,
    Line,
    Sine,
    Step,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub kind: SimKind,
    #[arg(long)]
    pub n: Option<usize>,
    /// Covariates for the Friedman generator.
    #[arg(long, default_value_t = 10)]
    pub p: usize,
    /// Noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Pdp(a) => commands::pdp(&a),
        Command::Ice(a) => commands::ice(&a),
        Command::Vi(a) => commands::vi(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Simulate(a) => commands::simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code as u8)
        }
    }
}
