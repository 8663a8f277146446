//! BFGS maximiser for smooth objectives with analytic gradients.
//!
//! The inverse-Hessian approximation starts at the identity, is rescaled once
//! after the first accepted step, and skips updates that fail the curvature
//! condition. Steps are chosen by backtracking until the sufficient-increase
//! (Armijo) condition holds; non-finite trial values halve the step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// An objective together with its dimension.
///
/// `eval` returns the value and gradient at a point. A non-finite value marks
/// the point as outside the objective's domain.
pub struct ObjectiveSpec<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    pub dimension: usize,
    pub eval: F,
}

impl<F> ObjectiveSpec<F>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    pub fn new(dimension: usize, eval: F) -> Self {
        Self { dimension, eval }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimControl {
    /// Stop once the gradient max-norm is at or below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimControl {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimReport {
    pub argmax: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

fn max_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Maximises `spec` from `start`.
///
/// Fails only when the start itself is unusable; running out of iterations or
/// stalling in the line search yields `converged = false` with the best iterate.
pub fn maximize<F>(spec: &ObjectiveSpec<F>, start: &DVector<f64>, control: &OptimControl) -> Result<OptimReport>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    maximize_with_metric(spec, start, None, control)
}

/// Like [`maximize`], but starts the BFGS approximation from `inverse_curvature`,
/// an estimate of the inverse of minus the Hessian at `start`; it must be
/// symmetric positive definite. Without one the identity is used.
pub fn maximize_with_metric<F>(
    spec: &ObjectiveSpec<F>,
    start: &DVector<f64>,
    inverse_curvature: Option<DMatrix<f64>>,
    control: &OptimControl,
) -> Result<OptimReport>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = spec.dimension;
    if start.len() != n {
        return Err(Error::Dimension(format!("start has {} entries, objective expects {n}", start.len())));
    }
    if !(control.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {}", control.tol)));
    }

    let mut x = start.clone();
    let (mut f, mut g) = (spec.eval)(&x);
    if g.len() != n {
        return Err(Error::Dimension(format!("gradient has {} entries, expected {n}", g.len())));
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("objective is not finite at the starting point (value {f})")));
    }

    if let Some(h0) = &inverse_curvature {
        if h0.shape() != (n, n) || h0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("initial metric must be a finite {n}x{n} matrix")));
        }
    }
    let scaled_start = inverse_curvature.is_some();
    let mut h = inverse_curvature.unwrap_or_else(|| DMatrix::<f64>::identity(n, n));
    let mut h_is_identity = !scaled_start;
    let mut scaled = scaled_start;
    let mut iterations = 0;
    let mut trace = vec![f];

    while iterations < control.max_iter {
        if max_norm(&g) <= control.tol {
            break;
        }
        iterations += 1;

        let mut direction = &h * &g;
        let mut slope = direction.dot(&g);
        if !(slope > 0.0) {
            h.fill_with_identity();
            h_is_identity = true;
            direction = g.clone();
            slope = direction.dot(&g);
        }

        let mut step = if h_is_identity { (1.0 / direction.norm()).min(1.0) } else { 1.0 };
        // Increases below this are rounding noise in the objective.
        let noise = 16.0 * f64::EPSILON * f.abs().max(1.0);
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &direction * step;
            let (ft, gt) = (spec.eval)(&trial);
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                let sufficient = ft - f >= ARMIJO_C1 * step * slope;
                // Near the optimum the Armijo gain drops below rounding noise;
                // accept a flat step if it shrinks the gradient.
                let flat_progress = ft - f >= -noise && max_norm(&gt) < max_norm(&g);
                if sufficient || flat_progress {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            if h_is_identity {
                break;
            }
            h.fill_with_identity();
            h_is_identity = true;
            continue;
        };

        // Update for the minimisation of -f: y = grad(-f)_new - grad(-f)_old.
        let s = &x_new - &x;
        let y = &g - &g_new;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                h *= sy / y.dot(&y);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            h_is_identity = false;
        }

        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
    }

    let gradient_norm = max_norm(&g);
    Ok(OptimReport { argmax: x, value: f, gradient_norm, iterations, converged: gradient_norm <= control.tol, trace })
}

/// Central finite-difference gradient, for checking analytic gradients.
pub fn finite_difference_gradient<G>(f: G, x: &DVector<f64>, rel_step: f64) -> DVector<f64>
where
    G: Fn(&DVector<f64>) -> f64,
{
    let mut grad = DVector::zeros(x.len());
    for k in 0..x.len() {
        let h = rel_step * x[k].abs().max(1.0);
        let mut up = x.clone();
        let mut down = x.clone();
        up[k] += h;
        down[k] -= h;
        grad[k] = (f(&up) - f(&down)) / (2.0 * h);
    }
    grad
}
