//! `rtpmix`: fit, select, test and simulate right-truncated Poisson mixture
//! regressions from CSV files.
//!
//! Exit status: 0 on success, 2 for input or validation errors, 3 when a
//! fit does not converge (a partial report is still written).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "rtpmix", version, about = "Right-truncated Poisson mixture regression")]
pub struct Cli {
    /// Worker threads for simulation replicates and candidate fits (0 = all cores).
    /// Results do not depend on it, so reports leave it out.
    #[arg(long, global = true, env = "RTPMIX_THREADS", default_value_t = 0)]
    #[serde(skip)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Fit a J-component mixture and report coefficients, criteria and residuals.
    Fit(FitArgs),
    /// Choose the number of components, then prune covariates by LR tests.
    Select(SelectArgs),
    /// Naive and truncation-aware overdispersion checks.
    Dispersion(DispersionArgs),
    /// Monte Carlo estimation or selection study on a preset or JSON configuration.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Response column (non-negative integer counts).
    #[arg(long)]
    pub response: String,
    /// Numeric covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Categorical columns, dummy coded against their reference level.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Reference level override as COLUMN=LEVEL (default: lexicographically first level).
    #[arg(long = "reference", value_parser = parse_reference)]
    pub reference: Vec<(String, String)>,
    /// Truncation threshold; defaults to the largest observed response.
    #[arg(long)]
    pub threshold: Option<u32>,
}

fn parse_reference(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(c, l)| (c.to_string(), l.to_string()))
        .ok_or_else(|| format!("expected COLUMN=LEVEL, got '{s}'"))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmArgs {
    /// Stop threshold on weight and coefficient changes.
    #[arg(long, default_value_t = 1e-6)]
    pub eps_param: f64,
    /// Stop threshold on the log-likelihood gain.
    #[arg(long, default_value_t = 1e-8)]
    pub eps_loglik: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Random starting points per candidate model.
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
    /// Random seed [default: 1, or the configuration's seed for `simulate --config`].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of mixture components.
    #[arg(long, short = 'j', default_value_t = 2)]
    pub components: usize,
    #[command(flatten)]
    pub em: EmArgs,
    /// Also write Pearson residuals as CSV to this path.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionArg {
    Aic,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    Argmin,
    EarlyStop,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest number of components tried.
    #[arg(long, default_value_t = 3)]
    pub max_components: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    pub criterion: CriterionArg,
    #[arg(long, value_enum, default_value_t = RuleArg::Argmin)]
    pub rule: RuleArg,
    /// Relative criterion improvement below which the early-stop rule stops.
    #[arg(long, default_value_t = 1e-3)]
    pub relative: f64,
    /// Significance level for backward covariate elimination.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DispersionArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyArg {
    Estimation,
    Selection,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Built-in configuration: config1, config2, config3 or config4.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sample size per replicate (overrides the configuration).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of replicates (overrides the configuration).
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_enum, default_value_t = StudyArg::Estimation)]
    pub study: StudyArg,
    /// Largest number of components in a selection study.
    #[arg(long, default_value_t = 3)]
    pub max_components: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
