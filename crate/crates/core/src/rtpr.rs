//! Unicomponent right-truncated Poisson regression with a log link.
//!
//! The weighted log-likelihood and score here are also the per-component
//! M-step objective of the mixture fit.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optimizer::{maximize_with_metric, ObjectiveSpec, OptimControl, OptimReport};
use crate::truncdist::TruncatedPoisson;

/// Largest admissible |x'beta|; beyond it the rate over- or underflows.
pub const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RtprFit {
    pub coefficients: DVector<f64>,
    pub loglik: f64,
    /// Standard errors from the inverse observed information; NaN when singular.
    pub se: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Linear predictors `x_i' beta` with the overflow guard applied.
pub fn linear_predictor(design: &DMatrix<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if design.ncols() != beta.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, coefficient vector has {}",
            design.ncols(),
            beta.len()
        )));
    }
    let eta = design * beta;
    if let Some((row, &e)) = eta.iter().enumerate().find(|(_, e)| !(e.abs() <= ETA_LIMIT)) {
        return Err(Error::RateOverflow { row, eta: e });
    }
    Ok(eta)
}

/// Rates `lambda_i = exp(x_i' beta)`.
pub fn linear_predictor_rates(design: &DMatrix<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(linear_predictor(design, beta)?.map(f64::exp))
}

/// Weighted log-likelihood `sum_i w_i log f(y_i | beta)` and its gradient
/// `sum_i w_i (y_i - E[Y_i]) x_i`. `None` means unit weights.
pub fn weighted_loglik_score(
    data: &Dataset,
    beta: &DVector<f64>,
    weights: Option<&[f64]>,
) -> Result<(f64, DVector<f64>)> {
    if weights.is_some_and(|w| w.len() != data.n()) {
        return Err(Error::Dimension(format!("{} weights for {} observations", weights.map_or(0, <[f64]>::len), data.n())));
    }
    let eta = linear_predictor(data.design(), beta)?;
    let x = data.design();
    let tau = data.threshold();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(beta.len());
    for (i, (&e, &y)) in eta.iter().zip(data.responses()).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let d = TruncatedPoisson::from_log_rate_unchecked(e, tau);
        ll += w * d.log_pmf_unchecked(y);
        let r = w * (y as f64 - d.mean());
        for k in 0..grad.len() {
            grad[k] += r * x[(i, k)];
        }
    }
    Ok((ll, grad))
}

pub fn loglik(data: &Dataset, beta: &DVector<f64>) -> Result<f64> {
    Ok(weighted_loglik_score(data, beta, None)?.0)
}

pub fn score(data: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(weighted_loglik_score(data, beta, None)?.1)
}

/// Maximises the weighted log-likelihood from `start`.
pub(crate) fn maximize_weighted(
    data: &Dataset,
    weights: Option<&[f64]>,
    start: &DVector<f64>,
    control: &OptimControl,
) -> Result<OptimReport> {
    let spec = ObjectiveSpec::new(data.k(), |b: &DVector<f64>| match weighted_loglik_score(data, b, weights) {
        Ok(v) => v,
        Err(_) => (f64::NAN, DVector::zeros(b.len())),
    });
    let metric = weighted_information(data, start, weights).ok().and_then(|info| info.try_inverse());
    let metric = metric.filter(|m| m.iter().all(|v| v.is_finite()));
    maximize_with_metric(&spec, start, metric, control)
}

/// `sum_i w_i Var(Y_i) x_i x_i'`: minus the Hessian of the weighted log-likelihood.
///
/// The truncated Poisson is an exponential family in the linear predictor, so
/// this is exact.
pub(crate) fn weighted_information(data: &Dataset, beta: &DVector<f64>, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let eta = linear_predictor(data.design(), beta)?;
    let x = data.design();
    let k = data.k();
    let mut info = DMatrix::zeros(k, k);
    for (i, &e) in eta.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let v = w * TruncatedPoisson::from_log_rate_unchecked(e, data.threshold()).variance();
        for a in 0..k {
            for b in 0..=a {
                info[(a, b)] += v * x[(i, a)] * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    Ok(info)
}

/// Starting point: intercept at the log of the mean response pulled into (0, threshold).
pub fn default_start(data: &Dataset) -> DVector<f64> {
    let n = data.n() as f64;
    let mean = data.responses().iter().map(|&y| y as f64).sum::<f64>() / n;
    let tau = data.threshold() as f64;
    let mut start = DVector::zeros(data.k());
    start[0] = mean.clamp(0.1, tau - 0.1).ln();
    start
}

/// Observed information `-d score / d beta` by central differences of the score.
pub fn observed_information(data: &Dataset, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = beta.len();
    let mut info = DMatrix::zeros(k, k);
    for c in 0..k {
        let h = 1e-6 * beta[c].abs().max(1.0);
        let mut up = beta.clone();
        let mut down = beta.clone();
        up[c] += h;
        down[c] -= h;
        let diff = (score(data, &up)? - score(data, &down)?) / (2.0 * h);
        info.set_column(c, &(-diff));
    }
    Ok((&info + info.transpose()) * 0.5)
}

/// Maximum-likelihood fit.
pub fn fit(data: &Dataset, start: Option<&DVector<f64>>, control: &OptimControl) -> Result<RtprFit> {
    let tau = data.threshold();
    if data.responses().iter().all(|&y| y == 0) {
        return Err(Error::Fit("all responses are 0; the rate estimate diverges to zero".into()));
    }
    if data.responses().iter().all(|&y| y == tau) {
        return Err(Error::Fit(format!("all responses equal the threshold {tau}; the rate estimate diverges")));
    }
    let start = match start {
        Some(s) if s.len() != data.k() => {
            return Err(Error::Dimension(format!("start has {} entries, design has {}", s.len(), data.k())))
        }
        Some(s) => s.clone(),
        None => default_start(data),
    };
    let report = maximize_weighted(data, None, &start, control)?;
    let beta = report.argmax;

    let mut warnings = Vec::new();
    let info = observed_information(data, &beta)?;
    let se = match info.clone().cholesky() {
        Some(chol) => chol.inverse().diagonal().map(f64::sqrt),
        None => {
            warnings.push("observed information is not positive definite; standard errors unavailable".into());
            DVector::from_element(beta.len(), f64::NAN)
        }
    };
    let rates = linear_predictor_rates(data.design(), &beta)?;
    let above = rates.iter().filter(|&&r| r > tau as f64).count();
    if above > 0 {
        warnings.push(format!("{above} fitted rates exceed the truncation threshold {tau} (severe truncation)"));
    }
    if !report.converged {
        warnings.push(format!(
            "optimizer stopped after {} iterations with gradient norm {:.3e}",
            report.iterations, report.gradient_norm
        ));
    }
    Ok(RtprFit {
        coefficients: beta,
        loglik: report.value,
        se,
        converged: report.converged,
        iterations: report.iterations,
        warnings,
    })
}
