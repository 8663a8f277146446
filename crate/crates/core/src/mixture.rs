//! Finite mixtures of right-truncated Poisson regressions fitted by EM.
//!
//! Each EM iteration computes posterior component memberships (E-step),
//! updates the mixing weights in closed form, and maximises each component's
//! responsibility-weighted log-likelihood with BFGS. Iteration continues while
//! any of the weight change, coefficient change, or log-likelihood gain is at
//! or above its threshold.
//!
//! The stopping rule's log-likelihood is the observed-data log-likelihood:
//! the complete-data version needs the unobserved memberships.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::{distinct_rows, kmeans, standardize};
use crate::optimizer::OptimControl;
use crate::rtpr::{self, linear_predictor};
use crate::truncdist::{check_simplex, TruncatedPoisson};

/// Mixing weights are kept at or above this so no component's log-weight is -inf.
pub const WEIGHT_FLOOR: f64 = 1e-10;
/// A converged weight below this is reported as a collapsed component.
pub const COLLAPSE_WARNING: f64 = 1e-6;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    weights: Vec<f64>,
    /// One row per component.
    coefficients: DMatrix<f64>,
    threshold: u32,
}

impl MixtureModel {
    pub fn new(weights: Vec<f64>, coefficients: DMatrix<f64>, threshold: u32) -> Result<Self> {
        if weights.is_empty() || weights.len() != coefficients.nrows() {
            return Err(Error::Dimension(format!(
                "{} weights for {} coefficient rows",
                weights.len(),
                coefficients.nrows()
            )));
        }
        check_simplex(&weights, 1e-10)?;
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidParameter("mixing weights must be positive".into()));
        }
        TruncatedPoisson::check_threshold(threshold)?;
        Ok(Self { weights, coefficients, threshold })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// `(J - 1) + J K` free parameters.
    pub fn n_params(&self) -> usize {
        self.components() - 1 + self.coefficients.len()
    }

    pub fn component_coefficients(&self, j: usize) -> DVector<f64> {
        self.coefficients.row(j).transpose()
    }

    /// Relabels components so `new[j] = old[order[j]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let weights = order.iter().map(|&j| self.weights[j]).collect();
        let coefficients = self.coefficients.select_rows(order);
        Self { weights, coefficients, threshold: self.threshold }
    }

    /// Component order by ascending intercept, ties broken by later coefficients.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.components()).collect();
        order.sort_by(|&a, &b| {
            let ra = self.coefficients.row(a);
            let rb = self.coefficients.row(b);
            for (x, y) in ra.iter().zip(rb.iter()) {
                if (x - y).abs() > 1e-6 {
                    return x.total_cmp(y);
                }
            }
            std::cmp::Ordering::Equal
        });
        order
    }
}

pub(crate) fn row_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// Posterior membership probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(pub DMatrix<f64>);

impl Responsibilities {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmControl {
    /// Threshold on the max change of weights and of coefficients.
    pub eps_param: f64,
    /// Threshold on the observed log-likelihood gain.
    pub eps_loglik: f64,
    pub max_iter: usize,
    /// Per-component M-step optimizer settings.
    pub inner: OptimControl,
}

impl Default for EmControl {
    fn default() -> Self {
        Self { eps_param: 1e-6, eps_loglik: 1e-8, max_iter: 500, inner: OptimControl::default() }
    }
}

impl EmControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_param > 0.0 && self.eps_loglik > 0.0 && self.inner.tol > 0.0) {
            return Err(Error::InvalidParameter("EM thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub model: MixtureModel,
    pub responsibilities: Responsibilities,
    /// Observed log-likelihood at the start and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// M-step subproblems whose optimizer did not reach its tolerance.
    pub m_step_failures: usize,
    pub warnings: Vec<String>,
}

impl MixtureFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// `ln p_j + ln f(y_i | lambda_ij)` for every observation and component.
fn joint_log_densities(data: &Dataset, model: &MixtureModel) -> Result<DMatrix<f64>> {
    check_compatible(data, model)?;
    let (n, j) = (data.n(), model.components());
    let mut out = DMatrix::zeros(n, j);
    for c in 0..j {
        let eta = linear_predictor(data.design(), &model.component_coefficients(c))?;
        let log_w = model.weights[c].ln();
        for (i, (&e, &y)) in eta.iter().zip(data.responses()).enumerate() {
            out[(i, c)] = log_w + TruncatedPoisson::from_log_rate_unchecked(e, data.threshold()).log_pmf_unchecked(y);
        }
    }
    Ok(out)
}

fn check_compatible(data: &Dataset, model: &MixtureModel) -> Result<()> {
    if model.coefficients.ncols() != data.k() {
        return Err(Error::Dimension(format!(
            "model has {} coefficients per component, design has {} columns",
            model.coefficients.ncols(),
            data.k()
        )));
    }
    if model.threshold != data.threshold() {
        return Err(Error::InvalidParameter(format!(
            "model threshold {} differs from data threshold {}",
            model.threshold,
            data.threshold()
        )));
    }
    Ok(())
}

fn row_logsumexp(m: &DMatrix<f64>, i: usize) -> f64 {
    let row = m.row(i);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Observed-data log-likelihood and responsibilities from one density pass.
fn loglik_and_responsibilities(data: &Dataset, model: &MixtureModel) -> Result<(f64, Responsibilities)> {
    let mut joint = joint_log_densities(data, model)?;
    let mut ll = 0.0;
    for i in 0..joint.nrows() {
        let lse = row_logsumexp(&joint, i);
        if !lse.is_finite() {
            return Err(Error::Numerical(format!("observation {} has zero likelihood under every component", i + 1)));
        }
        ll += lse;
        let mut row = joint.row_mut(i);
        row.apply(|v| *v = (*v - lse).exp());
        let s = row.sum();
        row /= s;
    }
    Ok((ll, Responsibilities(joint)))
}

pub fn observed_loglik(data: &Dataset, model: &MixtureModel) -> Result<f64> {
    let joint = joint_log_densities(data, model)?;
    let mut ll = 0.0;
    for i in 0..joint.nrows() {
        ll += row_logsumexp(&joint, i);
    }
    Ok(ll)
}

pub fn e_step(data: &Dataset, model: &MixtureModel) -> Result<Responsibilities> {
    Ok(loglik_and_responsibilities(data, model)?.1)
}

/// Column means of the responsibilities, floored and renormalised.
pub fn m_step_weights(resp: &Responsibilities) -> Vec<f64> {
    let n = resp.0.nrows() as f64;
    let raw: Vec<f64> = resp.0.column_iter().map(|c| (c.sum() / n).max(WEIGHT_FLOOR)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Maximises each component's weighted log-likelihood from `start`.
///
/// Returns the new coefficients and the number of components whose optimizer
/// did not converge. A component whose optimizer errors keeps its start row.
pub fn m_step_coefficients(
    data: &Dataset,
    resp: &Responsibilities,
    start: &DMatrix<f64>,
    control: &OptimControl,
) -> Result<(DMatrix<f64>, usize)> {
    if start.nrows() != resp.0.ncols() || start.ncols() != data.k() || resp.0.nrows() != data.n() {
        return Err(Error::Dimension("responsibilities, start and data disagree".into()));
    }
    let mut out = start.clone();
    let mut failures = 0;
    for j in 0..start.nrows() {
        let weights: Vec<f64> = resp.0.column(j).iter().cloned().collect();
        let beta0 = start.row(j).transpose();
        match rtpr::maximize_weighted(data, Some(&weights), &beta0, control) {
            Ok(report) => {
                if !report.converged {
                    failures += 1;
                }
                out.set_row(j, &report.argmax.transpose());
            }
            Err(_) => failures += 1,
        }
    }
    Ok((out, failures))
}

/// Starting values: k-means on the standardized covariates, an RTPR fit per cluster.
///
/// With an intercept-only design the response is clustered instead.
pub fn initialize<R: Rng + ?Sized>(data: &Dataset, components: usize, rng: &mut R) -> Result<MixtureModel> {
    if components == 0 {
        return Err(Error::InvalidParameter("need at least one component".into()));
    }
    if components == 1 {
        let global = rtpr::fit(data, None, &OptimControl::default())?;
        return MixtureModel::new(vec![1.0], row_matrix(&global.coefficients), data.threshold());
    }
    let points = if data.k() > 1 {
        data.design().columns(1, data.k() - 1).into_owned()
    } else {
        DMatrix::from_iterator(data.n(), 1, data.responses().iter().map(|&y| y as f64))
    };
    let distinct = distinct_rows(&points);
    if components > distinct {
        return Err(Error::Fit(format!(
            "{components} components requested but only {distinct} distinct covariate rows"
        )));
    }
    let clustering = kmeans(&standardize(&points), components, KMEANS_RESTARTS, rng)?;
    initialize_from_labels(data, components, &clustering.labels, rng)
}

/// Starting values from a hard partition: occupancy proportions and per-group RTPR fits.
///
/// A group whose fit fails (or is empty) gets the global fit plus `0.1 * N(0, 1)` noise.
pub fn initialize_from_labels<R: Rng + ?Sized>(
    data: &Dataset,
    components: usize,
    labels: &[usize],
    rng: &mut R,
) -> Result<MixtureModel> {
    if labels.len() != data.n() || labels.iter().any(|&l| l >= components) {
        return Err(Error::Dimension("labels must assign every observation to a component".into()));
    }
    let control = OptimControl::default();
    let global = rtpr::fit(data, None, &control)?;
    let n = data.n() as f64;
    let mut weights = Vec::with_capacity(components);
    let mut coefficients = DMatrix::zeros(components, data.k());
    for c in 0..components {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == c).collect();
        weights.push((rows.len() as f64 / n).max(WEIGHT_FLOOR));
        let fitted = data
            .select_rows(&rows)
            .and_then(|sub| rtpr::fit(&sub, Some(&global.coefficients), &control))
            .ok()
            .filter(|f| f.coefficients.iter().all(|v| v.is_finite() && v.abs() < 50.0));
        let row = match fitted {
            Some(f) => f.coefficients,
            None => global.coefficients.map(|b| b + 0.1 * rng.sample::<f64, _>(StandardNormal)),
        };
        coefficients.set_row(c, &row.transpose());
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    MixtureModel::new(weights, coefficients, data.threshold())
}

/// EM fit. Without `start`, initial values come from [`initialize`] driven by `seed`.
///
/// Components of the returned model are in canonical (ascending intercept) order.
pub fn em_fit(
    data: &Dataset,
    components: usize,
    start: Option<MixtureModel>,
    control: &EmControl,
    seed: u64,
) -> Result<MixtureFit> {
    control.validate()?;
    let mut model = match start {
        Some(m) => {
            if m.components() != components {
                return Err(Error::Dimension(format!(
                    "start has {} components, {components} requested",
                    m.components()
                )));
            }
            check_compatible(data, &m)?;
            m
        }
        None => initialize(data, components, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };

    let (mut ll, mut resp) = loglik_and_responsibilities(data, &model)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut m_step_failures = 0;
    while iterations < control.max_iter {
        iterations += 1;
        let weights = m_step_weights(&resp);
        let (coefficients, failures) = m_step_coefficients(data, &resp, &model.coefficients, &control.inner)?;
        m_step_failures += failures;
        let next = MixtureModel { weights, coefficients, threshold: model.threshold };
        let (next_ll, next_resp) = loglik_and_responsibilities(data, &next)?;

        let dp = next.weights.iter().zip(&model.weights).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let db = (&next.coefficients - &model.coefficients).amax();
        let gain = next_ll - ll;
        model = next;
        ll = next_ll;
        resp = next_resp;
        trace.push(ll);
        if dp < control.eps_param && db < control.eps_param && gain < control.eps_loglik {
            converged = true;
            break;
        }
    }

    let order = model.canonical_order();
    let model = model.permuted(&order);
    let resp = Responsibilities(resp.0.select_columns(&order));

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("EM did not converge within {} iterations", control.max_iter));
    }
    if components > 1 && model.weights.iter().any(|&w| w < COLLAPSE_WARNING) {
        warnings.push("a component collapsed to a near-zero mixing weight (boundary of the parameter space)".into());
    }
    if m_step_failures > 0 {
        warnings.push(format!("{m_step_failures} M-step subproblems stopped before reaching the gradient tolerance"));
    }
    Ok(MixtureFit {
        model,
        responsibilities: resp,
        loglik_trace: trace,
        converged,
        iterations,
        m_step_failures,
        warnings,
    })
}
