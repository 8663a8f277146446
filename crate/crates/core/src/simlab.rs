//! Monte Carlo studies: data generation from a configured mixture, estimation
//! accuracy (mean, relative MSE, relative bias) and component-count selection
//! frequencies.
//!
//! Every replicate draws from its own stream derived from `(seed, replicate)`,
//! so results do not depend on thread count or scheduling.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{em_fit, EmControl, MixtureModel};
use crate::selection::{select_components, Criterion, SelectionControl, SelectionRule};
use crate::truncdist::{check_simplex, TruncatedPoisson};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Share of non-converged replicates above which a study is flagged unreliable.
pub const UNRELIABLE_FRACTION: f64 = 0.2;

const STREAM_DATA: u64 = 0x5EED_DA7A;
const STREAM_FIT: u64 = 0x5EED_F17;

/// SplitMix64 finaliser, used to derive independent per-replicate seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, replicate: u64, stream: u64) -> u64 {
    mix(mix(mix(seed) ^ replicate) ^ stream)
}

/// Runs `f(0..count)` on a pool of `threads` workers (0 = all cores), keeping index order.
pub fn run_indexed<T, F>(threads: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(&f).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Intercept,
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub name: String,
    pub weights: Vec<f64>,
    /// One row per component; the first entry of each row is the intercept.
    pub coefficients: Vec<Vec<f64>>,
    pub threshold: u32,
    /// One law per design column; the first must be `intercept`.
    pub covariates: Vec<CovariateLaw>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

fn uniform(low: f64, high: f64) -> CovariateLaw {
    CovariateLaw::Uniform { low, high }
}

impl SimulationConfig {
    /// Built-in two-component configurations `config1` to `config4`.
    pub fn preset(name: &str) -> Option<Self> {
        use CovariateLaw::Intercept;
        let (weights, coefficients, threshold, covariates) = match name {
            "config1" => (vec![0.3, 0.7], vec![vec![-1.2, 0.1], vec![1.5, -0.01]], 5, vec![Intercept, uniform(0.0, 20.0)]),
            "config2" => (vec![0.4, 0.6], vec![vec![-1.2, 0.1], vec![1.5, -0.01]], 5, vec![Intercept, uniform(0.0, 20.0)]),
            "config3" => (
                vec![0.1, 0.9],
                vec![vec![0.7, -0.3, 0.4], vec![1.58, -0.1, 0.3]],
                6,
                vec![Intercept, uniform(1.0, 3.0), uniform(0.0, 1.0)],
            ),
            "config4" => (
                vec![0.3, 0.7],
                vec![vec![0.3, 0.14], vec![0.9, -0.2]],
                5,
                vec![Intercept, CovariateLaw::Normal { mean: 3.0, sd: 0.9 }],
            ),
            _ => return None,
        };
        Some(Self { name: name.to_string(), weights, coefficients, threshold, covariates, n: 1000, replicates: 100, seed: 1 })
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["config1", "config2", "config3", "config4"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_size(mut self, n: usize, replicates: usize, seed: u64) -> Self {
        self.n = n;
        self.replicates = replicates;
        self.seed = seed;
        self
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.coefficients.len() != self.weights.len() {
            return Err(Error::InvalidParameter("need one coefficient row per mixing weight".into()));
        }
        check_simplex(&self.weights, 1e-10)?;
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidParameter("mixing weights must be positive".into()));
        }
        TruncatedPoisson::check_threshold(self.threshold)?;
        let k = self.covariates.len();
        if k == 0 || self.covariates[0] != CovariateLaw::Intercept {
            return Err(Error::InvalidParameter("the first covariate law must be the intercept".into()));
        }
        if self.covariates[1..].contains(&CovariateLaw::Intercept) {
            return Err(Error::InvalidParameter("only the first column may be the intercept".into()));
        }
        for law in &self.covariates {
            match *law {
                CovariateLaw::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                    return Err(Error::InvalidParameter(format!("bad uniform bounds [{low}, {high})")))
                }
                CovariateLaw::Normal { mean, sd } if !(mean.is_finite() && sd.is_finite() && sd > 0.0) => {
                    return Err(Error::InvalidParameter(format!("bad normal law ({mean}, {sd})")))
                }
                _ => {}
            }
        }
        if self.coefficients.iter().any(|row| row.len() != k || row.iter().any(|b| !b.is_finite())) {
            return Err(Error::InvalidParameter(format!("each coefficient row needs {k} finite entries")));
        }
        if self.n <= k || self.replicates == 0 {
            return Err(Error::InvalidParameter("need n > number of coefficients and at least one replicate".into()));
        }
        Ok(())
    }

    pub fn true_model(&self) -> Result<MixtureModel> {
        let k = self.covariates.len();
        let coefs = DMatrix::from_row_iterator(self.components(), k, self.coefficients.iter().flatten().cloned());
        MixtureModel::new(self.weights.clone(), coefs, self.threshold)
    }

    /// `(name, value)` for every parameter: weights first, then coefficients row-major.
    pub fn true_parameters(&self) -> Vec<(String, f64)> {
        parameter_names(self.components(), self.covariates.len())
            .into_iter()
            .zip(self.weights.iter().chain(self.coefficients.iter().flatten()).cloned())
            .collect()
    }
}

/// `p1..pJ`, then `beta{j}{k}` with both indices 1-based and `k = 1` the intercept.
pub fn parameter_names(components: usize, k: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=components).map(|j| format!("p{j}")).collect();
    for j in 1..=components {
        names.extend((1..=k).map(|c| format!("beta{j}{c}")));
    }
    names
}

/// A generated sample together with the latent component of each row.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub data: Dataset,
    pub labels: Vec<usize>,
}

pub fn generate_with_labels(config: &SimulationConfig, replicate: u64) -> Result<SimulatedSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, replicate, STREAM_DATA));
    let (n, k, jn) = (config.n, config.covariates.len(), config.components());
    let mut design = DMatrix::zeros(n, k);
    let mut responses = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for (c, law) in config.covariates.iter().enumerate() {
            design[(i, c)] = match *law {
                CovariateLaw::Intercept => 1.0,
                CovariateLaw::Uniform { low, high } => Uniform::new(low, high).expect("validated").sample(&mut rng),
                CovariateLaw::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(&mut rng),
            };
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = jn - 1;
        for (j, &w) in config.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                component = j;
                break;
            }
        }
        let eta: f64 = (0..k).map(|c| design[(i, c)] * config.coefficients[component][c]).sum();
        let dist = TruncatedPoisson::from_log_rate(eta, config.threshold)?;
        responses.push(dist.sample(&mut rng));
        labels.push(component);
    }
    let data = Dataset::new(responses, design, config.threshold)?;
    Ok(SimulatedSample { data, labels })
}

/// Replicate `replicate` of `config`; identical inputs give bit-identical data.
pub fn generate(config: &SimulationConfig, replicate: u64) -> Result<Dataset> {
    Ok(generate_with_labels(config, replicate)?.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: u64,
    pub seed: u64,
    /// Canonically ordered estimates, same layout as `true_parameters`; empty if the fit failed.
    pub estimates: Vec<f64>,
    pub converged: bool,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub parameter: String,
    #[serde(rename = "true")]
    pub true_value: f64,
    pub mean: f64,
    pub remse: f64,
    pub rbias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub replicates_used: usize,
}

impl MetricTable {
    /// Mean, `sum (a_i - a)^2 / (N a^2)` and `sum (a_i - a) / (N a)` over the N estimate vectors.
    pub fn from_estimates(truth: &[(String, f64)], estimates: &[Vec<f64>]) -> Result<Self> {
        if estimates.iter().any(|e| e.len() != truth.len()) {
            return Err(Error::Dimension("estimate vectors do not match the parameter layout".into()));
        }
        let count = estimates.len() as f64;
        let rows = truth
            .iter()
            .enumerate()
            .map(|(p, (name, alpha))| {
                let (mut sum, mut sq, mut dev) = (0.0, 0.0, 0.0);
                for e in estimates {
                    sum += e[p];
                    sq += (e[p] - alpha).powi(2);
                    dev += e[p] - alpha;
                }
                MetricRow {
                    parameter: name.clone(),
                    true_value: *alpha,
                    mean: sum / count,
                    remse: sq / (count * alpha * alpha),
                    rbias: dev / (count * alpha),
                }
            })
            .collect();
        Ok(Self { rows, replicates_used: estimates.len() })
    }

    pub fn row(&self, parameter: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,true,mean,remse,rbias\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.parameter, r.true_value, r.mean, r.remse, r.rbias);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationStudy {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub replicates: Vec<ReplicateResult>,
    pub metrics: MetricTable,
    pub non_converged: usize,
    pub unreliable: bool,
}

fn fit_replicate(config: &SimulationConfig, replicate: u64, control: &EmControl) -> ReplicateResult {
    let seed = derive_seed(config.seed, replicate, STREAM_FIT);
    let mut out = ReplicateResult { replicate, seed, estimates: Vec::new(), converged: false, loglik: None, iterations: 0, error: None };
    match generate(config, replicate).and_then(|data| em_fit(&data, config.components(), None, control, seed)) {
        Ok(fit) => {
            out.estimates = fit.model.weights().iter().chain(fit.model.coefficients().transpose().iter()).cloned().collect();
            out.converged = fit.converged;
            out.loglik = Some(fit.loglik());
            out.iterations = fit.iterations;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Fits the true number of components to every replicate and summarises accuracy.
///
/// Non-converged replicates are kept in the report but left out of the metrics
/// (which are NaN if no replicate converged).
pub fn run_estimation_study(config: &SimulationConfig, control: &EmControl, threads: usize) -> Result<EstimationStudy> {
    config.validate()?;
    control.validate()?;
    let replicates = run_indexed(threads, config.replicates, |r| fit_replicate(config, r as u64, control))?;
    let used: Vec<Vec<f64>> = replicates.iter().filter(|r| r.converged).map(|r| r.estimates.clone()).collect();
    let non_converged = replicates.len() - used.len();
    let metrics = MetricTable::from_estimates(&config.true_parameters(), &used)?;
    Ok(EstimationStudy {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        unreliable: non_converged as f64 > UNRELIABLE_FRACTION * replicates.len() as f64,
        replicates,
        metrics,
        non_converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReplicate {
    pub replicate: u64,
    pub seed: u64,
    pub selected_aic: Option<usize>,
    pub selected_bic: Option<usize>,
    pub aic: Vec<Option<f64>>,
    pub bic: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStudy {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub j_max: usize,
    /// `counts[j - 1] = [aic, bic]`: replicates selecting `j` components.
    pub counts: Vec<[usize; 2]>,
    pub failed: usize,
    pub replicates: Vec<SelectionReplicate>,
}

impl SelectionStudy {
    pub fn aic_count(&self, j: usize) -> usize {
        self.counts[j - 1][0]
    }

    pub fn bic_count(&self, j: usize) -> usize {
        self.counts[j - 1][1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("components,aic,bic\n");
        for (j, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", j + 1, c[0], c[1]);
        }
        out
    }
}

/// For every replicate, sweeps `J = 1..=j_max` once and records the AIC and BIC choices.
pub fn run_selection_study(
    config: &SimulationConfig,
    j_max: usize,
    control: &SelectionControl,
    threads: usize,
) -> Result<SelectionStudy> {
    config.validate()?;
    if j_max == 0 {
        return Err(Error::InvalidParameter("j_max must be at least 1".into()));
    }
    let replicates = run_indexed(threads, config.replicates, |r| {
        let replicate = r as u64;
        let seed = derive_seed(config.seed, replicate, STREAM_FIT);
        let mut out = SelectionReplicate { replicate, seed, selected_aic: None, selected_bic: None, aic: vec![], bic: vec![], error: None };
        let control = SelectionControl { seed, threads: 1, criterion: Criterion::Bic, rule: SelectionRule::Argmin, ..*control };
        match generate(config, replicate).and_then(|data| select_components(&data, j_max, &control)) {
            Ok(sel) => {
                out.selected_bic = sel.selected_by(Criterion::Bic);
                out.selected_aic = sel.selected_by(Criterion::Aic);
                out.aic = sel.scores.iter().map(|s| s.as_ref().map(|s| s.aic)).collect();
                out.bic = sel.scores.iter().map(|s| s.as_ref().map(|s| s.bic)).collect();
            }
            Err(e) => out.error = Some(e.to_string()),
        }
        out
    })?;
    let mut counts = vec![[0usize; 2]; j_max];
    let mut failed = 0;
    for r in &replicates {
        match (r.selected_aic, r.selected_bic) {
            (Some(a), Some(b)) => {
                counts[a - 1][0] += 1;
                counts[b - 1][1] += 1;
            }
            _ => failed += 1,
        }
    }
    Ok(SelectionStudy { schema_version: REPORT_SCHEMA_VERSION, config: config.clone(), j_max, counts, failed, replicates })
}
