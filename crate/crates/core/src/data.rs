//! Validated count-regression data: responses on `{0, ..., threshold}` and a
//! full-rank design whose first column is the intercept.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::truncdist::TruncatedPoisson;

/// Smallest admissible ratio of extreme singular values of the design.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub const INTERCEPT_NAME: &str = "(Intercept)";

/// A group of design columns that enter or leave the model together,
/// e.g. the dummies of one categorical variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateBlock {
    pub name: String,
    /// Column indices into the design; never includes the intercept.
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    responses: Vec<u32>,
    design: DMatrix<f64>,
    threshold: u32,
    column_names: Vec<String>,
    blocks: Vec<CovariateBlock>,
}

impl Dataset {
    /// Validates and builds a dataset. Each non-intercept column becomes its own block.
    pub fn new(responses: Vec<u32>, design: DMatrix<f64>, threshold: u32) -> Result<Self> {
        let k = design.ncols();
        let mut column_names = vec![INTERCEPT_NAME.to_string()];
        column_names.extend((1..k).map(|c| format!("x{c}")));
        let blocks = (1..k).map(|c| CovariateBlock { name: format!("x{c}"), columns: vec![c] }).collect();
        Self::with_names(responses, design, threshold, column_names, blocks)
    }

    pub fn with_names(
        responses: Vec<u32>,
        design: DMatrix<f64>,
        threshold: u32,
        column_names: Vec<String>,
        blocks: Vec<CovariateBlock>,
    ) -> Result<Self> {
        TruncatedPoisson::check_threshold(threshold)?;
        let (n, k) = design.shape();
        if responses.len() != n {
            return Err(Error::Dimension(format!("{} responses for {n} design rows", responses.len())));
        }
        if column_names.len() != k {
            return Err(Error::Dimension(format!("{} column names for {k} columns", column_names.len())));
        }
        if k == 0 {
            return Err(Error::Data("design has no columns".into()));
        }
        if n <= k {
            return Err(Error::Data(format!("need more observations ({n}) than coefficients ({k})")));
        }
        if let Some((row, &y)) = responses.iter().enumerate().find(|(_, &y)| y > threshold) {
            return Err(Error::Data(format!(
                "response {y} at observation {} exceeds the truncation threshold {threshold}",
                row + 1
            )));
        }
        if design.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Data("first design column must be the intercept (all ones)".into()));
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("design contains non-finite values".into()));
        }
        let mut seen = vec![false; k];
        seen[0] = true;
        for block in &blocks {
            for &c in &block.columns {
                if c == 0 || c >= k || seen[c] {
                    return Err(Error::Data(format!("block '{}' has invalid column {c}", block.name)));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("every non-intercept column must belong to a block".into()));
        }
        check_full_rank(&design)?;
        Ok(Self { responses, design, threshold, column_names, blocks })
    }

    pub fn responses(&self) -> &[u32] {
        &self.responses
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn blocks(&self) -> &[CovariateBlock] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    /// Number of coefficients per component, intercept included.
    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    /// Keeps only the named blocks (the intercept always stays).
    pub fn with_blocks(&self, keep: &[String]) -> Result<Self> {
        let mut cols = vec![0usize];
        let mut blocks = Vec::new();
        for block in &self.blocks {
            if keep.contains(&block.name) {
                let start = cols.len();
                cols.extend(&block.columns);
                blocks.push(CovariateBlock { name: block.name.clone(), columns: (start..cols.len()).collect() });
            }
        }
        let design = self.design.select_columns(&cols);
        let names = cols.iter().map(|&c| self.column_names[c].clone()).collect();
        Self::with_names(self.responses.clone(), design, self.threshold, names, blocks)
    }

    /// Subset of observations; fails if the subset loses rank.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let design = self.design.select_rows(rows);
        let responses = rows.iter().map(|&r| self.responses[r]).collect();
        Self::with_names(responses, design, self.threshold, self.column_names.clone(), self.blocks.clone())
    }

    pub fn with_threshold(&self, threshold: u32) -> Result<Self> {
        Self::with_names(
            self.responses.clone(),
            self.design.clone(),
            threshold,
            self.column_names.clone(),
            self.blocks.clone(),
        )
    }
}

fn check_full_rank(design: &DMatrix<f64>) -> Result<()> {
    // Singular values of R from a QR factorisation equal those of the design.
    let r = design.clone().qr().r();
    let sv = r.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min / max < RANK_TOLERANCE {
        return Err(Error::Data(format!(
            "design matrix is rank deficient (singular value ratio {:.3e})",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.concat())
    }

    #[test]
    fn accepts_valid_data() {
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let d = Dataset::new(vec![0, 1, 2], x, 5).unwrap();
        assert_eq!((d.n(), d.k()), (3, 2));
        assert_eq!(d.column_names(), &["(Intercept)".to_string(), "x1".to_string()]);
    }

    #[test]
    fn rejects_invalid_data() {
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        assert!(Dataset::new(vec![0, 1, 6], x.clone(), 5).is_err());
        assert!(Dataset::new(vec![0, 1], x.clone(), 5).is_err());
        assert!(Dataset::new(vec![0, 1, 2], x.clone(), 1).is_err());
        let collinear = design(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert!(Dataset::new(vec![0, 1, 2], collinear, 5).is_err());
        let no_intercept = design(&[&[2.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        assert!(Dataset::new(vec![0, 1, 2], no_intercept, 5).is_err());
        let square = design(&[&[1.0, 0.0], &[1.0, 1.0]]);
        assert!(Dataset::new(vec![0, 1], square, 5).is_err());
    }

    #[test]
    fn dropping_blocks_keeps_intercept() {
        let x = design(&[&[1.0, 0.0, 3.0], &[1.0, 1.0, 1.0], &[1.0, 2.0, 0.5], &[1.0, 5.0, 0.0]]);
        let d = Dataset::new(vec![0, 1, 2, 3], x, 5).unwrap();
        let reduced = d.with_blocks(&["x2".to_string()]).unwrap();
        assert_eq!(reduced.k(), 2);
        assert_eq!(reduced.column_names()[1], "x2");
        assert_eq!(reduced.blocks()[0].columns, vec![1]);
        assert_eq!(d.with_blocks(&[]).unwrap().k(), 1);
    }
}
