use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsgcqr::datagen::{CovarianceKind, ErrorKind, Innovation};
use dsgcqr::experiment::Method;
use dsgcqr::{Error, Kernel, TopologyKind};

mod commands;
mod settings;

#[derive(Parser, Debug)]
#[command(
    name = "dsgcqr",
    version,
    about = "Decentralized smoothed quantile regression on feature-partitioned data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset split across machines.
    Generate(GenerateArgs),
    /// Fit the decentralized estimator on a dataset.
    Fit(FitArgs),
    /// Confidence intervals from a finished fit.
    Infer(InferArgs),
    /// Monte-Carlo testing-error or coverage experiments.
    Experiment(ExperimentArgs),
    /// Print the mixing matrix, its spectral factor and the optimal mixing rounds.
    TopologyInfo(TopologyInfoArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct ScenarioArgs {
    /// Sample size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of features.
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of machines.
    #[arg(long)]
    pub m: Option<usize>,
    /// Quantile level.
    #[arg(long)]
    pub tau: Option<f64>,
    /// homoscedastic or heteroscedastic.
    #[arg(long)]
    pub error_kind: Option<ErrorKind>,
    /// normal or t5.
    #[arg(long)]
    pub innovation: Option<Innovation>,
    /// ar or block_ar.
    #[arg(long)]
    pub covariance: Option<CovarianceKind>,
    /// Lag-one correlation of the covariate chain.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TopologyArgs {
    /// star, line, circle, complete or random.
    #[arg(long)]
    pub topology: Option<TopologyKind>,
    /// Edge fraction for random graphs.
    #[arg(long)]
    pub pi_w: Option<f64>,
    #[arg(long)]
    pub topology_seed: Option<u64>,
    /// 1-indexed edge list file; overrides --topology.
    #[arg(long)]
    pub edge_list: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct FitOpts {
    /// Step size.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Mixing rounds per iteration.
    #[arg(long)]
    pub kappa0: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative-change stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Fixed bandwidth; the rule of thumb is used when omitted.
    #[arg(long)]
    pub h: Option<f64>,
    /// Rule-of-thumb multiplier [default: 1.5].
    #[arg(long)]
    pub h_mult: Option<f64>,
    /// gaussian, uniform or epanechnikov.
    #[arg(long)]
    pub kernel: Option<Kernel>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct PrivacyArgs {
    /// Overall privacy level; enables the private variant.
    #[arg(long)]
    pub privacy_eps_bar: Option<f64>,
    /// Per-iteration epsilon; overrides --privacy-eps-bar.
    #[arg(long)]
    pub privacy_epsilon: Option<f64>,
    #[arg(long)]
    pub privacy_delta: Option<f64>,
    /// "empirical" or a fixed sensitivity value.
    #[arg(long)]
    pub privacy_sensitivity: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the privacy noise and random topologies.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Quantile level; taken from the manifest when omitted.
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub fit: FitOpts,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub privacy: PrivacyArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Output directory [default: the fit directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// hr, hs or both.
    #[arg(long)]
    pub mode: Option<String>,
    /// Confidence level [default: 0.95].
    #[arg(long)]
    pub level: Option<f64>,
    /// Fixed inference bandwidth.
    #[arg(long)]
    pub h_infer: Option<f64>,
    /// Rule-of-thumb multiplier for the inference bandwidth [default: 0.5].
    #[arg(long)]
    pub h_mult_infer: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// testing-error or coverage.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Comma-separated subset of dsg_cqr, dsg_cqr_pp, glb_cqr, iso_cqr.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Master seed for all replications.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step size of the centralized baselines.
    #[arg(long)]
    pub central_eta: Option<f64>,
    /// Coverage targets as node:coef pairs (1-indexed), e.g. 1:1,2:1.
    #[arg(long)]
    pub targets: Option<String>,
    /// Coverage modes: hr, hs or both.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub h_mult_infer: Option<f64>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub fit: FitOpts,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub privacy: PrivacyArgs,
}

#[derive(Args, Debug)]
pub struct TopologyInfoArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of nodes.
    #[arg(long)]
    pub m: Option<usize>,
    #[command(flatten)]
    pub topology: TopologyArgs,
    /// Step size used for the optimal mixing rounds.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Lower Hessian eigenvalue bound.
    #[arg(long)]
    pub a_l: Option<f64>,
    /// Upper Hessian eigenvalue bound.
    #[arg(long)]
    pub a_u: Option<f64>,
    /// Upper bound of the conditional error density.
    #[arg(long)]
    pub f_bar: Option<f64>,
    /// Largest eigenvalue of the covariate second-moment matrix.
    #[arg(long)]
    pub sigma_u: Option<f64>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_numerical() {
        3
    } else {
        4
    }
}

fn configure_threads() -> dsgcqr::Result<()> {
    let Ok(raw) = std::env::var("DSGCQR_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|t| *t > 0).ok_or_else(|| {
        Error::Domain(format!(
            "DSGCQR_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Construction(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Infer(a) => commands::infer(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::TopologyInfo(a) => commands::topology_info(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
