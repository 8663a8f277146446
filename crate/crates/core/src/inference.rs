//! Standard errors and tests for fitted mixtures.
//!
//! The information matrix is the sum over observations of outer products of
//! the per-observation conditional expected complete-data score. Parameters
//! are laid out as `p_1, ..., p_{J-1}` (the last weight is implied by the
//! simplex constraint) followed by the coefficients of each component in turn.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{e_step, MixtureModel};
use crate::rtpr::linear_predictor;
use crate::truncdist::TruncatedPoisson;

/// Information matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Allowed amount by which a reduced model may beat the full one in an LR test.
pub const LR_SLACK: f64 = 1e-8;

/// Names for the free parameters, e.g. `p1`, `comp2:(Intercept)`.
pub fn parameter_layout(data: &Dataset, components: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..components).map(|j| format!("p{j}")).collect();
    for j in 1..=components {
        names.extend(data.column_names().iter().map(|c| format!("comp{j}:{c}")));
    }
    names
}

/// Per-observation conditional scores, one row per observation.
pub fn score_matrix(data: &Dataset, model: &MixtureModel) -> Result<DMatrix<f64>> {
    let (jn, k, n) = (model.components(), data.k(), data.n());
    let resp = e_step(data, model)?;
    let alpha = resp.matrix();
    let p = model.weights();
    let mut out = DMatrix::zeros(n, jn - 1 + jn * k);
    let x = data.design();
    for j in 0..jn {
        let eta = linear_predictor(x, &model.component_coefficients(j))?;
        for i in 0..n {
            let mean = TruncatedPoisson::from_log_rate(eta[i], model.threshold())?.mean();
            let r = alpha[(i, j)] * (data.responses()[i] as f64 - mean);
            for c in 0..k {
                out[(i, jn - 1 + j * k + c)] = r * x[(i, c)];
            }
        }
    }
    for i in 0..n {
        let last = alpha[(i, jn - 1)] / p[jn - 1];
        for j in 0..jn - 1 {
            out[(i, j)] = alpha[(i, j)] / p[j] - last;
        }
    }
    Ok(out)
}

/// Conditional expected complete-data score of observation `i` at the fitted parameters.
pub fn conditional_score(data: &Dataset, model: &MixtureModel, i: usize) -> Result<DVector<f64>> {
    if i >= data.n() {
        return Err(Error::Dimension(format!("observation {i} out of range (n = {})", data.n())));
    }
    Ok(score_matrix(data, model)?.row(i).transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InformationMatrix {
    pub matrix: DMatrix<f64>,
    pub layout: Vec<String>,
    pub condition_number: f64,
    pub singular: bool,
}

pub fn information(data: &Dataset, model: &MixtureModel) -> Result<InformationMatrix> {
    let s = score_matrix(data, model)?;
    let mut matrix = s.transpose() * &s;
    // Enforce exact symmetry against rounding in the product.
    matrix = (&matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(InformationMatrix {
        singular: !(condition_number <= MAX_CONDITION),
        condition_number,
        layout: parameter_layout(data, model.components()),
        matrix,
    })
}

impl InformationMatrix {
    /// Covariance estimate and, per coordinate, whether it is identified.
    ///
    /// For a singular matrix the inverse is taken on the well-conditioned
    /// eigenspace and coordinates loading on the null space are marked.
    pub fn covariance(&self) -> (DMatrix<f64>, Vec<bool>) {
        let d = self.matrix.nrows();
        let eig = SymmetricEigen::new(self.matrix.clone());
        let max = eig.eigenvalues.max().max(0.0);
        let mut cov = DMatrix::zeros(d, d);
        let mut identified = vec![true; d];
        for (e, &value) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(e);
            if value > 0.0 && value * MAX_CONDITION >= max {
                cov += (v * v.transpose()) / value;
            } else {
                for (c, id) in identified.iter_mut().enumerate() {
                    if v[c].abs() > 1e-6 {
                        *id = false;
                    }
                }
            }
        }
        (cov, identified)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    /// 1-based component index.
    pub component: usize,
    /// `weight` or a design column name.
    pub term: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub rows: Vec<CoefficientRow>,
    pub singular: bool,
    pub condition_number: f64,
}

impl CoefficientTable {
    pub fn get(&self, component: usize, term: &str) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.component == component && r.term == term)
    }
}

fn two_sided(z: f64) -> f64 {
    let normal = Normal::standard();
    2.0 * normal.sf(z.abs())
}

fn row(component: usize, term: String, estimate: f64, variance: Option<f64>) -> CoefficientRow {
    let se = variance.filter(|v| *v >= 0.0).map(f64::sqrt);
    let z = se.filter(|s| *s > 0.0).map(|s| estimate / s);
    CoefficientRow { component, term, estimate, se, z, p_value: z.map(two_sided) }
}

/// Estimates, Wald standard errors, z-statistics and two-sided p-values.
///
/// All `J` weights are listed; the last one's variance follows from the
/// constraint `p_J = 1 - sum of the others`.
pub fn coefficient_table(data: &Dataset, model: &MixtureModel) -> Result<CoefficientTable> {
    let info = information(data, model)?;
    let (cov, identified) = info.covariance();
    let (jn, k) = (model.components(), data.k());
    let var = |c: usize| identified[c].then(|| cov[(c, c)]);
    let mut rows = Vec::with_capacity(jn * (k + 1));
    for j in 0..jn {
        let variance = if j + 1 < jn {
            var(j)
        } else if jn == 1 {
            Some(0.0)
        } else {
            identified[..jn - 1].iter().all(|&b| b).then(|| cov.view((0, 0), (jn - 1, jn - 1)).sum())
        };
        rows.push(row(j + 1, "weight".into(), model.weights()[j], variance));
        for c in 0..k {
            let idx = jn - 1 + j * k + c;
            rows.push(row(j + 1, data.column_names()[c].clone(), model.coefficients()[(j, c)], var(idx)));
        }
    }
    Ok(CoefficientTable { rows, singular: info.singular, condition_number: info.condition_number })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Likelihood ratio test of a nested model; the reduced fit may exceed the
/// full one by at most [`LR_SLACK`].
pub fn lr_test(loglik_full: f64, loglik_reduced: f64, df: usize) -> Result<LrTest> {
    if df == 0 {
        return Err(Error::InvalidParameter("LR test needs at least one degree of freedom".into()));
    }
    if !(loglik_full.is_finite() && loglik_reduced.is_finite()) {
        return Err(Error::InvalidParameter("log-likelihoods must be finite".into()));
    }
    if loglik_full < loglik_reduced - LR_SLACK {
        return Err(Error::Fit(format!(
            "reduced model log-likelihood {loglik_reduced} exceeds the full model's {loglik_full}"
        )));
    }
    let statistic = (2.0 * (loglik_full - loglik_reduced)).max(0.0);
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(LrTest { statistic, df, p_value: chi.sf(statistic) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{em_fit, row_matrix, EmControl};
    use crate::optimizer::finite_difference_gradient;
    use crate::rtpr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let v: f64 = rng.random_range(0.0..20.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = v;
            let eta = if rng.random::<f64>() < 0.3 { -1.2 + 0.1 * v } else { 1.5 - 0.01 * v };
            y.push(TruncatedPoisson::from_log_rate(eta, 5).unwrap().sample(&mut rng));
        }
        Dataset::new(y, x, 5).unwrap()
    }

    fn model(weights: &[f64], coefs: &[f64], k: usize) -> MixtureModel {
        MixtureModel::new(weights.to_vec(), DMatrix::from_row_slice(weights.len(), k, coefs), 5).unwrap()
    }

    /// Expected complete-data log-likelihood of one observation with responsibilities frozen.
    fn q_i(data: &Dataset, alpha: &[f64], i: usize, theta: &DVector<f64>, jn: usize) -> f64 {
        let k = data.k();
        let mut weights: Vec<f64> = theta.iter().take(jn - 1).cloned().collect();
        weights.push(1.0 - weights.iter().sum::<f64>());
        (0..jn)
            .map(|j| {
                let eta: f64 = (0..k).map(|c| data.design()[(i, c)] * theta[jn - 1 + j * k + c]).sum();
                let lp = TruncatedPoisson::from_log_rate(eta, data.threshold()).unwrap();
                alpha[j] * (weights[j].ln() + lp.log_pmf(data.responses()[i] as i64).unwrap())
            })
            .sum()
    }

    #[test]
    fn conditional_score_matches_finite_differences() {
        let data = toy(1, 60);
        let m = model(&[0.35, 0.65], &[-1.0, 0.09, 1.4, -0.02], 2);
        let resp = e_step(&data, &m).unwrap();
        let theta = DVector::from_vec(vec![0.35, -1.0, 0.09, 1.4, -0.02]);
        for i in [0, 7, 33, 59] {
            let alpha: Vec<f64> = resp.matrix().row(i).iter().cloned().collect();
            let fd = finite_difference_gradient(|t| q_i(&data, &alpha, i, t, 2), &theta, 1e-6);
            let s = conditional_score(&data, &m, i).unwrap();
            assert!((&s - &fd).amax() <= 1e-5 * fd.amax().max(1.0), "{s} vs {fd}");
        }
    }

    #[test]
    fn single_component_score_is_unicomponent_score() {
        let data = toy(2, 80);
        let beta = DVector::from_vec(vec![0.8, 0.01]);
        let m = MixtureModel::new(vec![1.0], row_matrix(&beta), 5).unwrap();
        let total = score_matrix(&data, &m).unwrap().row_sum().transpose();
        let direct = rtpr::score(&data, &beta).unwrap();
        assert!((total - direct).amax() < 1e-10);
        assert_eq!(parameter_layout(&data, 1), vec!["comp1:(Intercept)", "comp1:x1"]);
    }

    #[test]
    fn score_sums_to_zero_at_the_estimate() {
        let data = toy(3, 800);
        let fit = em_fit(&data, 2, None, &EmControl { eps_param: 1e-9, eps_loglik: 1e-12, ..Default::default() }, 3).unwrap();
        assert!(fit.converged);
        let total = score_matrix(&data, &fit.model).unwrap().row_sum();
        assert!(total.amax() <= 1e-5, "{total}");
    }

    #[test]
    fn information_is_symmetric_psd_and_additive() {
        let data = toy(4, 120);
        let m = model(&[0.3, 0.7], &[-1.2, 0.1, 1.5, -0.01], 2);
        let info = information(&data, &m).unwrap();
        assert_eq!(info.layout.len(), 5);
        assert!((&info.matrix - info.matrix.transpose()).amax() <= 1e-12);
        assert!(SymmetricEigen::new(info.matrix.clone()).eigenvalues.min() >= -1e-8);

        let rows: Vec<usize> = (0..data.n()).chain(0..data.n()).collect();
        let doubled = data.select_rows(&rows).unwrap();
        let info2 = information(&doubled, &m).unwrap();
        assert!((&info2.matrix - &info.matrix * 2.0).amax() <= 1e-9 * info.matrix.amax());
    }

    #[test]
    fn single_component_information_tracks_observed_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random_range(0.0..5.0) });
        let y = (0..n)
            .map(|i| TruncatedPoisson::from_log_rate(0.4 + 0.2 * x[(i, 1)], 6).unwrap().sample(&mut rng))
            .collect();
        let data = Dataset::new(y, x, 6).unwrap();
        let fit = em_fit(&data, 1, None, &EmControl::default(), 0).unwrap();
        let opg = information(&data, &fit.model).unwrap().matrix;
        let observed = rtpr::observed_information(&data, &fit.model.component_coefficients(0)).unwrap();
        for d in 0..2 {
            assert!((opg[(d, d)] / observed[(d, d)] - 1.0).abs() < 0.15);
        }
    }

    #[test]
    fn intercept_only_se_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 200_000;
        let truth = TruncatedPoisson::new(2.5, 5).unwrap();
        let y: Vec<u32> = (0..n).map(|_| truth.sample(&mut rng)).collect();
        let data = Dataset::new(y, DMatrix::from_element(n, 1, 1.0), 5).unwrap();
        let fit = em_fit(&data, 1, None, &EmControl::default(), 0).unwrap();
        let table = coefficient_table(&data, &fit.model).unwrap();
        let se = table.get(1, "(Intercept)").unwrap().se.unwrap();
        // Fisher information per observation is the variance of Y, by brute-force summation.
        let fitted = TruncatedPoisson::from_log_rate(fit.model.coefficients()[(0, 0)], 5).unwrap();
        let mean: f64 = (0..=5).map(|v| v as f64 * fitted.pmf(v).unwrap()).sum();
        let var: f64 = (0..=5).map(|v| (v as f64 - mean).powi(2) * fitted.pmf(v).unwrap()).sum();
        let closed = 1.0 / (n as f64 * var).sqrt();
        assert!((se - closed).abs() < 1e-4, "{se} vs {closed}");
        let w = table.get(1, "weight").unwrap();
        assert_eq!((w.estimate, w.se), (1.0, Some(0.0)));
    }

    #[test]
    fn z_and_p_follow_definitions_and_scaling_is_equivariant() {
        let data = toy(7, 600);
        let control = EmControl::default();
        let fit = em_fit(&data, 2, None, &control, 7).unwrap();
        let table = coefficient_table(&data, &fit.model).unwrap();
        for r in &table.rows {
            if let (Some(se), Some(z), Some(p)) = (r.se, r.z, r.p_value) {
                assert!((z - r.estimate / se).abs() < 1e-12);
                assert!((p - two_sided(z)).abs() < 1e-15);
            }
        }
        let pj = table.get(2, "weight").unwrap().se.unwrap();
        assert!((pj - table.get(1, "weight").unwrap().se.unwrap()).abs() < 1e-12);

        let c = 4.0;
        let mut x = data.design().clone();
        x.column_mut(1).scale_mut(c);
        let scaled = Dataset::new(data.responses().to_vec(), x, 5).unwrap();
        let mut coefs = fit.model.coefficients().clone();
        coefs.column_mut(1).scale_mut(1.0 / c);
        let start = MixtureModel::new(fit.model.weights().to_vec(), coefs, 5).unwrap();
        let refit = em_fit(&scaled, 2, Some(start), &control, 0).unwrap();
        let t2 = coefficient_table(&scaled, &refit.model).unwrap();
        for j in 1..=2 {
            let a = table.get(j, "x1").unwrap();
            let b = t2.get(j, "x1").unwrap();
            assert!((b.estimate * c - a.estimate).abs() < 1e-6);
            assert!((b.se.unwrap() * c - a.se.unwrap()).abs() < 1e-6);
            assert!((b.z.unwrap() - a.z.unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn singular_information_marks_unidentified_coordinates() {
        let data = toy(8, 100);
        // Identical components: the weight is not identified.
        let m = model(&[0.5, 0.5], &[1.0, 0.0, 1.0, 0.0], 2);
        let info = information(&data, &m).unwrap();
        assert!(info.singular);
        let table = coefficient_table(&data, &m).unwrap();
        assert!(table.singular);
        assert!(table.get(1, "weight").unwrap().se.is_none());
    }

    #[test]
    fn lr_test_against_chi_square_quantiles() {
        let t = lr_test(-10.0, -10.0, 1).unwrap();
        assert_eq!((t.statistic, t.p_value), (0.0, 1.0));
        assert!((lr_test(0.0, -3.841 / 2.0, 1).unwrap().p_value - 0.05).abs() < 1e-3);
        assert!((lr_test(0.0, -5.991 / 2.0, 2).unwrap().p_value - 0.05).abs() < 1e-3);
        assert!(lr_test(0.0, 1e-9, 1).is_ok());
        assert!(lr_test(0.0, 1e-3, 1).is_err());
        assert!(lr_test(0.0, -1.0, 0).is_err());
    }
}
