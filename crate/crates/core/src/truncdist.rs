//! Right-truncated Poisson distribution on the finite support `{0, ..., threshold}`.
//!
//! With `f(y) = rate^y e^-rate / y!` and `F(u) = sum_{k<=u} f(k)`, the truncated
//! mass is `f(y) / F(threshold)`. Partial sums are accumulated by recurrence
//! for moderate rates and as a log-sum-exp over `k ln(rate) - ln(k!)` for large
//! ones, so large rates and thresholds never overflow.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};

/// Smallest admissible truncation threshold.
pub const MIN_THRESHOLD: u32 = 2;

// Once terms are past the mode and this many nats below the peak, the
// remaining tail is below double precision.
const TAIL_CUTOFF: f64 = 40.0;

/// Partial sums of `rate^k / k!`: the log of the sum up to `threshold`, and the
/// ratios of the sums up to `threshold - 1` and `threshold - 2` to that sum.
///
/// The `e^-rate` factor is left out: it cancels in every ratio we take.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LogSums {
    upto: f64,
    ratio_minus_1: f64,
    ratio_minus_2: f64,
}

// Below this rate the terms are accumulated directly by recurrence; the
// largest term is about e^rate, far from overflow.
const DIRECT_RATE_LIMIT: f64 = 500.0;

fn log_sums(log_rate: f64, rate: f64, threshold: u32) -> LogSums {
    if rate <= DIRECT_RATE_LIMIT {
        direct_sums(rate, threshold)
    } else {
        shifted_sums(log_rate, rate, threshold)
    }
}

fn direct_sums(rate: f64, threshold: u32) -> LogSums {
    let mut term = 1.0_f64;
    let mut acc = 0.0_f64;
    let (mut acc_m1, mut acc_m2) = (f64::NAN, f64::NAN);
    for k in 0..=threshold {
        if k == threshold {
            acc_m1 = acc;
        } else if k + 1 == threshold {
            acc_m2 = acc;
        }
        if k > 0 {
            term *= rate / k as f64;
        }
        acc += term;
        if k as f64 > 2.0 * rate + 1.0 && term < acc * f64::EPSILON * 1e-3 {
            (acc_m1, acc_m2) = (acc, acc);
            break;
        }
    }
    LogSums { upto: acc.ln(), ratio_minus_1: acc_m1 / acc, ratio_minus_2: acc_m2 / acc }
}

fn shifted_sums(log_rate: f64, rate: f64, threshold: u32) -> LogSums {
    // Terms peak at k = floor(rate); use that as the shift for the log-sum-exp.
    let mode = (rate.floor() as u64).min(threshold as u64);
    let shift = mode as f64 * log_rate - ln_factorial(mode);

    let mut acc = 0.0_f64;
    let mut acc_m1 = f64::NAN;
    let mut acc_m2 = f64::NAN;
    for k in 0..=threshold as u64 {
        if k == threshold as u64 {
            acc_m1 = acc;
        } else if k + 1 == threshold as u64 {
            acc_m2 = acc;
        }
        let t = k as f64 * log_rate - ln_factorial(k) - shift;
        acc += t.exp();
        if k as f64 > 2.0 * rate + 1.0 && t < -TAIL_CUTOFF {
            acc_m1 = acc;
            acc_m2 = acc;
            break;
        }
    }
    LogSums { upto: acc.ln() + shift, ratio_minus_1: acc_m1 / acc, ratio_minus_2: acc_m2 / acc }
}

/// Untruncated Poisson distribution function `F_rate(upper)`.
///
/// `value` is defined as 0 for a negative `upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonPartialSum {
    pub rate: f64,
    pub upper: i64,
    pub value: f64,
}

impl PoissonPartialSum {
    pub fn new(rate: f64, upper: i64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate must be positive, got {rate}")));
        }
        let value = if upper < 0 {
            0.0
        } else {
            let upper = u32::try_from(upper)
                .map_err(|_| Error::InvalidParameter(format!("upper bound {upper} too large")))?;
            (log_sums(rate.ln(), rate, upper).upto - rate).exp().min(1.0)
        };
        Ok(Self { rate, upper, value })
    }
}

/// A Poisson law with mean `rate`, restricted to `{0, ..., threshold}` and renormalised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedPoisson {
    rate: f64,
    threshold: u32,
    log_rate: f64,
    sums: LogSums,
}

impl TruncatedPoisson {
    pub fn new(rate: f64, threshold: u32) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("rate must be positive and finite, got {rate}")));
        }
        Self::check_threshold(threshold)?;
        Ok(Self::from_log_rate_unchecked(rate.ln(), threshold))
    }

    /// Builds the distribution from `ln(rate)`, the natural output of a log link.
    pub fn from_log_rate(log_rate: f64, threshold: u32) -> Result<Self> {
        if !log_rate.is_finite() || log_rate.exp() == 0.0 || !log_rate.exp().is_finite() {
            return Err(Error::InvalidParameter(format!("log-rate {log_rate} does not give a positive finite rate")));
        }
        Self::check_threshold(threshold)?;
        Ok(Self::from_log_rate_unchecked(log_rate, threshold))
    }

    pub fn check_threshold(threshold: u32) -> Result<()> {
        if threshold < MIN_THRESHOLD {
            return Err(Error::InvalidParameter(format!(
                "truncation threshold must be at least {MIN_THRESHOLD}, got {threshold}"
            )));
        }
        Ok(())
    }

    pub(crate) fn from_log_rate_unchecked(log_rate: f64, threshold: u32) -> Self {
        let rate = log_rate.exp();
        Self { rate, threshold, log_rate, sums: log_sums(log_rate, rate, threshold) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    fn check_support(&self, y: i64) -> Result<u32> {
        if y < 0 || y > self.threshold as i64 {
            return Err(Error::OutOfSupport { value: y, threshold: self.threshold });
        }
        Ok(y as u32)
    }

    /// `ln P(Y = y)`; out-of-support counts are an error rather than `-inf`.
    pub fn log_pmf(&self, y: i64) -> Result<f64> {
        let y = self.check_support(y)?;
        Ok(self.log_pmf_unchecked(y))
    }

    #[inline]
    pub(crate) fn log_pmf_unchecked(&self, y: u32) -> f64 {
        y as f64 * self.log_rate - ln_factorial(y as u64) - self.sums.upto
    }

    pub fn pmf(&self, y: i64) -> Result<f64> {
        self.log_pmf(y).map(f64::exp)
    }

    /// `rate * F(threshold - 1) / F(threshold)`.
    pub fn mean(&self) -> f64 {
        self.rate * self.sums.ratio_minus_1
    }

    /// Mean plus [`dispersion_excess`](Self::dispersion_excess).
    pub fn variance(&self) -> f64 {
        self.mean() + self.dispersion_excess()
    }

    /// `variance - mean = rate * a * (mean - threshold)` with `a = P(Y = threshold)`,
    /// negative because the mean lies below the threshold. Subtracting the
    /// moments directly loses this to rounding when the truncation barely bites.
    pub fn dispersion_excess(&self) -> f64 {
        let a = self.log_pmf_unchecked(self.threshold).exp();
        self.rate * a * (self.mean() - self.threshold as f64)
    }

    /// `E[Y(Y-1)] = rate^2 F(t-2)/F(t)`.
    pub(crate) fn second_factorial_moment(&self) -> f64 {
        self.rate * self.rate * self.sums.ratio_minus_2
    }

    /// Probabilities over the whole support, index = count.
    pub fn pmf_table(&self) -> Vec<f64> {
        (0..=self.threshold).map(|y| self.log_pmf_unchecked(y).exp()).collect()
    }

    /// Exact inverse-CDF draw by walking the cumulative table.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        for y in 0..self.threshold {
            cumulative += self.log_pmf_unchecked(y).exp();
            if u < cumulative {
                return y;
            }
        }
        self.threshold
    }
}

/// Mean and variance of a finite mixture of truncated Poisson laws sharing one threshold.
///
/// Uses the law of total variance with the mixing weights applied to every sum.
pub fn mixture_moments(weights: &[f64], rates: &[f64], threshold: u32) -> Result<(f64, f64)> {
    if weights.len() != rates.len() || weights.is_empty() {
        return Err(Error::Dimension(format!(
            "{} weights for {} rates",
            weights.len(),
            rates.len()
        )));
    }
    check_simplex(weights, 1e-10)?;
    let mut mean = 0.0;
    let mut raw_second = 0.0;
    for (&p, &rate) in weights.iter().zip(rates) {
        let d = TruncatedPoisson::new(rate, threshold)?;
        let m = d.mean();
        mean += p * m;
        raw_second += p * (d.second_factorial_moment() + m);
    }
    Ok((mean, raw_second - mean * mean))
}

pub(crate) fn check_simplex(weights: &[f64], tol: f64) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (total - 1.0).abs() > tol {
        return Err(Error::InvalidParameter(format!(
            "weights must lie on the simplex (sum = {total})"
        )));
    }
    Ok(())
}
