//! Lloyd's k-means with random restarts, used to seed the EM algorithm.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

const MAX_LLOYD_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    /// One row per cluster.
    pub centers: DMatrix<f64>,
    /// Within-cluster sum of squared Euclidean distances.
    pub wcss: f64,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.nrows()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|d| (points[(i, d)] - centers[(c, d)]).powi(2)).sum()
}

/// Number of distinct rows, compared bitwise.
pub fn distinct_rows(points: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> =
        (0..points.nrows()).map(|i| points.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Centers and scales each column to unit sample variance; constant columns are only centered.
pub fn standardize(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows() as f64;
    let mut out = points.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = if sd > 0.0 { (*v - mean) / sd } else { *v - mean };
        }
    }
    out
}

fn lloyd<R: Rng + ?Sized>(points: &DMatrix<f64>, k: usize, rng: &mut R) -> Clustering {
    let (n, dim) = points.shape();
    let mut centers = DMatrix::zeros(k, dim);
    for (c, i) in sample(rng, n, k).into_iter().enumerate() {
        centers.set_row(c, &points.row(i));
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITER {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|c| (c, sq_dist(points, i, &centers, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
                .0;
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        // Empty clusters take the point farthest from its current center.
        loop {
            let mut sizes = vec![0usize; k];
            for &l in &labels {
                sizes[l] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let far = (0..n)
                .filter(|&i| sizes[labels[i]] > 1)
                .map(|i| (i, sq_dist(points, i, &centers, labels[i])))
                .fold((usize::MAX, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                .0;
            if far == usize::MAX {
                break;
            }
            labels[far] = empty;
            centers.set_row(empty, &points.row(far));
            changed = true;
        }
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for d in 0..dim {
                sums[(labels[i], d)] += points[(i, d)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centers[(c, d)] = sums[(c, d)] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    Clustering { labels, centers, wcss }
}

/// Best of `restarts` Lloyd runs by within-cluster sum of squares.
pub fn kmeans<R: Rng + ?Sized>(points: &DMatrix<f64>, k: usize, restarts: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 || restarts == 0 {
        return Err(Error::InvalidParameter("k-means needs k >= 1 and at least one restart".into()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::Fit(format!("{k} clusters requested but only {distinct} distinct points")));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts {
        let run = lloyd(points, k, rng);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
