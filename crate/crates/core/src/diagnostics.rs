//! Dispersion checks, Pearson residuals and a pooled Pearson goodness-of-fit test.
//!
//! The truncated overdispersion test is a score test of the right-truncated
//! Poisson regression against a right-truncated negative binomial (variance
//! `mu + a mu^2` before truncation) at `a = 0`. For one observation the score
//! in `a` is
//!
//! ```text
//! s_i = ((y_i - l_i)^2 - y_i - E[(Y - l_i)^2 - Y]) / 2
//! ```
//!
//! with the expectation under the truncated Poisson null, so truncation only
//! shifts the untruncated score by its null mean. The statistic divides the
//! summed score by the square root of its variance after projecting out the
//! estimated coefficients; all moments are exact sums over `{0, ..., threshold}`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::optimizer::OptimControl;
use crate::rtpr::{self, linear_predictor};
use crate::truncdist::{mixture_moments, TruncatedPoisson};

pub const SCORE_TEST_METHOD: &str = "score_truncated_negbin";
/// Goodness-of-fit cells with a smaller expected count are pooled with a neighbour.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveDispersion {
    pub mean: f64,
    pub variance: f64,
    /// `variance - mean`.
    pub difference: f64,
}

/// Sample mean and variance (divisor `n - 1`) of the raw counts.
pub fn naive_dispersion_check(y: &[u32]) -> Result<NaiveDispersion> {
    if y.len() < 2 {
        return Err(Error::Data("need at least two observations".into()));
    }
    let n = y.len() as f64;
    let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let variance = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NaiveDispersion { mean, variance, difference: variance - mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionTestResult {
    pub statistic: f64,
    /// One-sided upper-tail p-value under the standard normal.
    pub p_value: f64,
    pub method: String,
}

pub fn truncated_overdispersion_test(data: &Dataset) -> Result<DispersionTestResult> {
    let fit = rtpr::fit(data, None, &OptimControl::default())?;
    if !fit.converged {
        return Err(Error::Fit("unicomponent fit did not converge; dispersion test unavailable".into()));
    }
    let tau = data.threshold();
    let eta = linear_predictor(data.design(), &fit.coefficients)?;
    let x = data.design();
    let k = data.k();
    let mut total = 0.0;
    let mut var_s = 0.0;
    let mut cross = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for (i, &y) in data.responses().iter().enumerate() {
        let dist = TruncatedPoisson::from_log_rate(eta[i], tau)?;
        let lam = dist.rate();
        let h = |v: f64| 0.5 * ((v - lam).powi(2) - v);
        let (mut eh, mut eh2, mut ey, mut ey2, mut ehy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for v in 0..=tau {
            let p = dist.pmf(v as i64)?;
            let (vf, hv) = (v as f64, h(v as f64));
            eh += p * hv;
            eh2 += p * hv * hv;
            ey += p * vf;
            ey2 += p * vf * vf;
            ehy += p * hv * vf;
        }
        total += h(y as f64) - eh;
        var_s += eh2 - eh * eh;
        let cov_sy = ehy - eh * ey;
        let var_y = ey2 - ey * ey;
        let xi = x.row(i).transpose();
        cross += &xi * cov_sy;
        info += &xi * xi.transpose() * var_y;
    }
    let chol = info
        .cholesky()
        .ok_or_else(|| Error::Numerical("information matrix of the null fit is not positive definite".into()))?;
    let variance = var_s - cross.dot(&chol.solve(&cross));
    if !(variance > 0.0) {
        return Err(Error::Numerical("score variance is not positive".into()));
    }
    let statistic = total / variance.sqrt();
    Ok(DispersionTestResult {
        statistic,
        p_value: Normal::standard().sf(statistic),
        method: SCORE_TEST_METHOD.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofCell {
    /// Smallest and largest response value pooled into this cell.
    pub low: u32,
    pub high: u32,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub fitted_mean: Vec<f64>,
    pub fitted_variance: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fraction_within_two: f64,
    pub cells: Vec<GofCell>,
    pub gof_statistic: f64,
    pub gof_df: usize,
    pub gof_p_value: f64,
}

impl ResidualReport {
    /// `observation,y,fitted_mean,residual` with 1-based observation ids.
    pub fn to_csv(&self, responses: &[u32]) -> String {
        let mut out = String::from("observation,y,fitted_mean,residual\n");
        for (i, ((y, m), r)) in responses.iter().zip(&self.fitted_mean).zip(&self.residuals).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", i + 1, y, m, r);
        }
        out
    }
}

/// Pools cells until every expected count reaches `min_expected` (or one cell remains).
///
/// The cell with the smallest expected count is merged into its neighbour
/// with the smaller expected count; ties go to the lower neighbour.
pub fn pool_cells(mut cells: Vec<GofCell>, min_expected: f64) -> Vec<GofCell> {
    while cells.len() > 1 {
        let (idx, cell) = cells
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.expected.total_cmp(&b.1.expected))
            .expect("non-empty");
        if cell.expected >= min_expected {
            break;
        }
        let target = match (idx.checked_sub(1), (idx + 1 < cells.len()).then_some(idx + 1)) {
            (Some(lo), Some(hi)) => {
                if cells[hi].expected < cells[lo].expected {
                    hi
                } else {
                    lo
                }
            }
            (Some(lo), None) => lo,
            (None, Some(hi)) => hi,
            (None, None) => unreachable!("more than one cell"),
        };
        let removed = cells.remove(idx);
        let t = if target > idx { target - 1 } else { target };
        let c = &mut cells[t];
        c.low = c.low.min(removed.low);
        c.high = c.high.max(removed.high);
        c.observed += removed.observed;
        c.expected += removed.expected;
    }
    cells
}

pub fn pearson_residuals(data: &Dataset, model: &MixtureModel) -> Result<ResidualReport> {
    let tau = model.threshold();
    if data.threshold() != tau || data.k() != model.coefficients().ncols() {
        return Err(Error::Dimension("model does not match the data".into()));
    }
    let n = data.n();
    let etas: Vec<DVector<f64>> =
        (0..model.components()).map(|j| linear_predictor(data.design(), &model.component_coefficients(j))).collect::<Result<_>>()?;
    let mut fitted_mean = Vec::with_capacity(n);
    let mut fitted_variance = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    let mut expected = vec![0.0; tau as usize + 1];
    let mut observed = vec![0.0; tau as usize + 1];
    for (i, &y) in data.responses().iter().enumerate() {
        let rates: Vec<f64> = etas.iter().map(|e| e[i].exp()).collect();
        let (mean, var) = mixture_moments(model.weights(), &rates, tau)?;
        if !(var > 0.0) {
            return Err(Error::Numerical(format!("non-positive fitted variance at observation {}", i + 1)));
        }
        fitted_mean.push(mean);
        fitted_variance.push(var);
        residuals.push((y as f64 - mean) / var.sqrt());
        observed[y as usize] += 1.0;
        for (j, e) in etas.iter().enumerate() {
            let dist = TruncatedPoisson::from_log_rate(e[i], tau)?;
            for (v, slot) in expected.iter_mut().enumerate() {
                *slot += model.weights()[j] * dist.pmf(v as i64)?;
            }
        }
    }
    let within = residuals.iter().filter(|r| r.abs() <= 2.0).count();
    let cells: Vec<GofCell> = (0..=tau)
        .map(|v| GofCell { low: v, high: v, observed: observed[v as usize], expected: expected[v as usize] })
        .collect();
    let cells = pool_cells(cells, MIN_EXPECTED);
    let gof_statistic = cells.iter().map(|c| (c.observed - c.expected).powi(2) / c.expected).sum();
    let gof_df = (cells.len() as i64 - 1 - model.n_params() as i64).max(1) as usize;
    let gof_p_value = ChiSquared::new(gof_df as f64).expect("df >= 1").sf(gof_statistic);
    Ok(ResidualReport {
        fitted_mean,
        fitted_variance,
        residuals,
        fraction_within_two: within as f64 / n as f64,
        cells,
        gof_statistic,
        gof_df,
        gof_p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::row_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn naive_check_hand_values() {
        let c = naive_dispersion_check(&[2, 2, 2, 2]).unwrap();
        assert_eq!((c.mean, c.variance, c.difference), (2.0, 0.0, -2.0));
        let c = naive_dispersion_check(&[0, 1, 2, 3]).unwrap();
        assert!((c.mean - 1.5).abs() < 1e-12);
        assert!((c.variance - 5.0 / 3.0).abs() < 1e-12);
        assert!((c.difference - 1.0 / 6.0).abs() < 1e-12);
        assert!(naive_dispersion_check(&[1]).is_err());
    }

    #[test]
    fn naive_check_reproduces_reported_moments() {
        let y = [0, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 4, 4, 5, 5, 5, 6, 6, 6, 6, 7, 7, 8, 9, 10, 10];
        let c = naive_dispersion_check(&y).unwrap();
        let r2 = |v: f64| (v * 100.0).round() / 100.0;
        assert_eq!((r2(c.mean), r2(c.variance), r2(c.difference)), (4.32, 8.23, 3.90));
    }

    #[test]
    fn pooling_merges_sparse_cells_deterministically() {
        let cell = |v, e| GofCell { low: v, high: v, observed: e, expected: e };
        let pooled = pool_cells(vec![cell(0, 1.0), cell(1, 10.0), cell(2, 20.0), cell(3, 3.0), cell(4, 1.0)], 5.0);
        let spans: Vec<(u32, u32)> = pooled.iter().map(|c| (c.low, c.high)).collect();
        assert_eq!(spans, vec![(0, 1), (2, 4)]);
        let total: f64 = pooled.iter().map(|c| c.expected).sum();
        assert_eq!(total, 35.0);
        let tiny = pool_cells(vec![cell(0, 1.0), cell(1, 1.0)], 5.0);
        assert_eq!(tiny.len(), 1);
    }

    fn intercept_only(y: Vec<u32>, tau: u32) -> Dataset {
        let n = y.len();
        Dataset::new(y, DMatrix::from_element(n, 1, 1.0), tau).unwrap()
    }

    #[test]
    fn frequencies_proportional_to_the_pmf_fit_perfectly() {
        let dist = TruncatedPoisson::new(2.0, 5).unwrap();
        let mut y = Vec::new();
        for v in 0..=5u32 {
            let count = (1e6 * dist.pmf(v as i64).unwrap()).round() as usize;
            y.extend(std::iter::repeat_n(v, count));
        }
        let data = intercept_only(y, 5);
        let fit = rtpr::fit(&data, None, &OptimControl::default()).unwrap();
        let model = MixtureModel::new(vec![1.0], row_matrix(&fit.coefficients), 5).unwrap();
        let report = pearson_residuals(&data, &model).unwrap();
        let mean_residual = report.residuals.iter().sum::<f64>() / data.n() as f64;
        assert!(mean_residual.abs() < 1e-6);
        assert!(report.gof_p_value > 0.5, "{}", report.gof_p_value);
        let total: f64 = report.cells.iter().map(|c| c.expected).sum();
        assert!((total - data.n() as f64).abs() < 1e-8 * data.n() as f64);
        assert!(report.fraction_within_two > 0.9);
    }

    #[test]
    fn residuals_use_mixture_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(0.0..10.0) });
        let y = (0..n).map(|i| (i % 6) as u32).collect();
        let data = Dataset::new(y, x, 5).unwrap();
        let model = MixtureModel::new(vec![0.3, 0.7], DMatrix::from_row_slice(2, 2, &[-1.2, 0.1, 1.5, -0.01]), 5).unwrap();
        let report = pearson_residuals(&data, &model).unwrap();
        for i in [0, 17, 49] {
            let v = data.design()[(i, 1)];
            let rates = [(-1.2 + 0.1 * v).exp(), (1.5 - 0.01 * v).exp()];
            let (m, var) = mixture_moments(&[0.3, 0.7], &rates, 5).unwrap();
            let expect = (data.responses()[i] as f64 - m) / var.sqrt();
            assert!((report.residuals[i] - expect).abs() < 1e-12);
        }
        let total: f64 = report.cells.iter().map(|c| c.expected).sum();
        assert!((total - n as f64).abs() < 1e-8);
        let csv = report.to_csv(data.responses());
        assert!(csv.starts_with("observation,y,fitted_mean,residual\n1,0,"));
        assert_eq!(csv.lines().count(), n + 1);
    }

    #[test]
    fn truncated_draws_are_underdispersed() {
        let dist = TruncatedPoisson::new(3.0, 5).unwrap();
        let mut negative = 0;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<u32> = (0..1000).map(|_| dist.sample(&mut rng)).collect();
            if naive_dispersion_check(&y).unwrap().difference < 0.0 {
                negative += 1;
            }
        }
        assert!(negative >= 38);
    }

    #[test]
    fn score_test_flags_strong_mixing_and_accepts_the_null_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 2000;
        let y: Vec<u32> = (0..n)
            .map(|_| {
                let lam = if rng.random::<f64>() < 0.5 { 0.3 } else { 8.0 };
                TruncatedPoisson::new(lam, 10).unwrap().sample(&mut rng)
            })
            .collect();
        let r = truncated_overdispersion_test(&intercept_only(y, 10)).unwrap();
        assert_eq!(r.method, SCORE_TEST_METHOD);
        assert!(r.p_value < 1e-6, "{r:?}");

        let dist = TruncatedPoisson::new(2.0, 6).unwrap();
        let y: Vec<u32> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let r = truncated_overdispersion_test(&intercept_only(y, 6)).unwrap();
        assert!((0.0..=1.0).contains(&r.p_value));
        assert!(r.statistic.abs() < 4.0);
    }
}
