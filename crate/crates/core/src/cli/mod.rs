//! Command-line front end: `fit`, `simulate`, `summarize`, `diagnose`.
//!
//! Every command writes into a staging directory that is renamed into place
//! only on success. Failures print one JSON error record on stderr and exit
//! with 2 (input), 3 (numerical) or 4 (R̂ above threshold with
//! `--strict-rhat`).

mod commands;
pub mod config;
pub mod output;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::basis::BasisSettings;
use crate::error::{Error, ErrorKind};
use crate::sampler::{PriorConfig, RePriorKind, SamplerConfig};
use crate::simgen::{DistanceLaw, ScenarioConfig};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "stapdp", version, about = "Clustered distance-decay exposure models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to subject and distance tables.
    Fit(FitArgs),
    /// Generate synthetic data or run a simulation study.
    Simulate(SimulateArgs),
    /// Cluster-level summaries from a fit's draws.
    Summarize(SummarizeArgs),
    /// R̂ table and traces from a fit's draws.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Truncation level K.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub retained: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub low_member_threshold: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, s: &mut SamplerConfig) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut s.n_clusters, self.clusters);
        set(&mut s.chains, self.chains);
        set(&mut s.burn_in, self.burn_in);
        set(&mut s.retained, self.retained);
        set(&mut s.thin, self.thin);
        set(&mut s.low_member_threshold, self.low_member_threshold);
    }
}

#[derive(Debug, Args)]
pub struct BasisFlags {
    /// Number of B-spline functions L.
    #[arg(long)]
    pub n_basis: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub penalty_order: Option<usize>,
}

impl BasisFlags {
    fn apply(&self, b: &mut BasisSettings) {
        if let Some(v) = self.n_basis {
            b.n_basis = v;
        }
        if let Some(v) = self.degree {
            b.degree = v;
        }
        if let Some(v) = self.penalty_order {
            b.penalty_order = v;
        }
    }

    fn any(&self) -> bool {
        self.n_basis.is_some() || self.degree.is_some() || self.penalty_order.is_some()
    }
}

fn parse_re_prior(s: &str) -> Result<RePriorKind, String> {
    match s {
        "jeffreys" => Ok(RePriorKind::Jeffreys),
        "inverse-wishart" => Ok(RePriorKind::InverseWishart),
        _ => Err(format!("expected `jeffreys` or `inverse-wishart`, got `{s}`")),
    }
}

fn parse_law(s: &str) -> Result<DistanceLaw, String> {
    DistanceLaw::ALL
        .into_iter()
        .find(|l| l.name() == s)
        .ok_or_else(|| format!("expected one of uniform, ca, skew; got `{s}`"))
}

#[derive(Debug, Args)]
pub struct PriorFlags {
    /// Random-effect covariance prior: jeffreys or inverse-wishart.
    #[arg(long, value_parser = parse_re_prior)]
    pub re_prior: Option<RePriorKind>,
    #[arg(long)]
    pub re_prior_df: Option<f64>,
    #[arg(long)]
    pub re_prior_scale: Option<f64>,
    /// Fixed-effect prior variance as a multiple of var(y).
    #[arg(long)]
    pub gamma_prior_scale: Option<f64>,
}

impl PriorFlags {
    fn apply(&self, p: &mut PriorConfig) {
        if let Some(v) = self.re_prior {
            p.re_prior = v;
        }
        if self.re_prior_df.is_some() {
            p.re_prior_df = self.re_prior_df;
        }
        if let Some(v) = self.re_prior_scale {
            p.re_prior_scale = v;
        }
        if let Some(v) = self.gamma_prior_scale {
            p.gamma_prior_scale = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct RhatFlags {
    /// Exit with status 4 when any R̂ exceeds the threshold.
    #[arg(long)]
    pub strict_rhat: bool,
    #[arg(long)]
    pub rhat_threshold: Option<f64>,
    /// Functional to check (repeatable): sigma2, alpha, n_occupied,
    /// gamma:<name>, f:<subject>:<distance>.
    #[arg(long = "functional")]
    pub functionals: Vec<String>,
}

impl RhatFlags {
    fn apply(&self, c: &mut RunConfig) {
        c.strict_rhat |= self.strict_rhat;
        if let Some(v) = self.rhat_threshold {
            c.rhat_threshold = v;
        }
        if !self.functionals.is_empty() {
            c.functionals = Some(self.functionals.clone());
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<PathBuf>,
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// TOML schema describing the input columns, radius and basis.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exposure radius; overrides the schema.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[command(flatten)]
    pub basis: BasisFlags,
    #[command(flatten)]
    pub prior: PriorFlags,
    #[command(flatten)]
    pub rhat: RhatFlags,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioFlags {
    #[arg(long)]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, value_parser = parse_law)]
    pub law_high: Option<DistanceLaw>,
    #[arg(long, value_parser = parse_law)]
    pub law_low: Option<DistanceLaw>,
    #[arg(long)]
    pub mean_features: Option<usize>,
    #[arg(long)]
    pub count_halfwidth: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

impl ScenarioFlags {
    fn apply(&self, s: &mut ScenarioConfig) {
        if let Some(v) = self.n_subjects {
            s.n_subjects = v;
        }
        if let Some(v) = self.nu {
            s.nu = v;
        }
        if let Some(v) = self.law_high {
            s.law_high = v;
        }
        if let Some(v) = self.law_low {
            s.law_low = v;
        }
        if let Some(v) = self.mean_features {
            s.mean_features = v;
        }
        if self.count_halfwidth.is_some() {
            s.count_halfwidth = self.count_halfwidth;
        }
        if let Some(v) = self.sigma {
            s.sigma = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub kind: SimulateKind,
}

#[derive(Debug, Subcommand)]
pub enum SimulateKind {
    /// Write one synthetic dataset with its generating labels.
    Generate(SimCommon),
    /// Relative Binder loss across effect-size multipliers ν.
    EffectSize(StudyArgs),
    /// Relative Binder loss across distance laws and feature counts.
    Distance(StudyArgs),
}

#[derive(Debug, Args)]
pub struct SimCommon {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: SimCommon,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Ten replicates (unless --replicates is given).
    #[arg(long)]
    pub desk: bool,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory of `fit` (or its draws/ subdirectory).
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Subject covariate table for a cluster-by-covariate cross-tabulation.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long, default_value = "id")]
    pub covariate_id: String,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub draws: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub rhat: RhatFlags,
    #[arg(long)]
    pub force: bool,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Error(Error),
    /// Outputs were written, but R̂ exceeded the threshold.
    Convergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Error(e) => match e.kind() {
                ErrorKind::Input => EXIT_INPUT,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            },
            Failure::Convergence(_) => EXIT_CONVERGENCE,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Failure::Error(e) => match e.kind() {
                ErrorKind::Input => "input",
                ErrorKind::Numerical => "numerical",
            },
            Failure::Convergence(_) => "convergence",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let message = match self {
            Failure::Error(e) => e.to_string(),
            Failure::Convergence(m) => m.clone(),
        };
        serde_json::json!({
            "status": "error",
            "kind": self.kind_name(),
            "exit_code": self.exit_code(),
            "message": message,
        })
        .to_string()
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Fit(args) => commands::fit(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Summarize(args) => commands::summarize(&args),
        Command::Diagnose(args) => commands::diagnose(&args),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.record());
            f.exit_code()
        }
    }
}
