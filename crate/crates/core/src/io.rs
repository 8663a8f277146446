//! CSV input: a header-first comma-separated table is turned into a
//! [`Dataset`] by naming the response, numeric covariates and categorical
//! covariates. Categorical columns are dummy coded against a reference level
//! (the lexicographically smallest unless overridden) and form one block.
//!
//! Line numbers in errors count the header as line 1.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateBlock, Dataset, INTERCEPT_NAME};
use crate::error::{Error, Result};

/// Offending rows listed in a single error message.
const MAX_LISTED_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Source line of each row.
    pub lines: Vec<u64>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found; available: {}", self.headers.join(", "))))
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

/// Parses comma-separated UTF-8 text with a header row; fields are trimmed.
pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse { line: 1, message: "missing header row".into() });
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if h.is_empty() {
            return Err(Error::Parse { line: 1, message: "empty column name in header".into() });
        }
        if !seen.insert(h) {
            return Err(Error::Parse { line: 1, message: format!("duplicate column name '{h}'") });
        }
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        lines.push(record.position().map_or(0, |p| p.line()));
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(CsvTable { headers, rows, lines })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub response: String,
    pub covariates: Vec<String>,
    pub categoricals: Vec<String>,
    /// Largest observable count; defaults to the largest observed response.
    pub threshold: Option<u32>,
    /// Reference level per categorical column, overriding the default.
    pub reference_levels: BTreeMap<String, String>,
}

fn parse_count(field: &str, line: u64, column: &str) -> Result<u32> {
    field.parse::<u32>().map_err(|_| Error::Parse {
        line,
        message: format!("column '{column}': expected a non-negative integer count, found '{field}'"),
    })
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line, message: format!("column '{column}': expected a finite number, found '{field}'") })
}

pub fn build_dataset(table: &CsvTable, spec: &DatasetSpec) -> Result<Dataset> {
    let mut used = BTreeSet::new();
    for name in std::iter::once(&spec.response).chain(&spec.covariates).chain(&spec.categoricals) {
        if !used.insert(name) {
            return Err(Error::Data(format!("column '{name}' is used more than once")));
        }
    }
    for name in spec.reference_levels.keys() {
        if !spec.categoricals.contains(name) {
            return Err(Error::Data(format!("reference level given for '{name}', which is not a categorical column")));
        }
    }
    let n = table.rows.len();
    let response_col = table.column(&spec.response)?;
    let responses: Vec<u32> = table
        .rows
        .iter()
        .zip(&table.lines)
        .map(|(row, &line)| parse_count(&row[response_col], line, &spec.response))
        .collect::<Result<_>>()?;
    let threshold = match spec.threshold {
        Some(t) => t,
        None => responses.iter().copied().max().unwrap_or(0),
    };
    let offending: Vec<String> = responses
        .iter()
        .zip(&table.lines)
        .filter(|(&y, _)| y > threshold)
        .map(|(y, line)| format!("line {line} (value {y})"))
        .collect();
    if !offending.is_empty() {
        let shown = offending.iter().take(MAX_LISTED_ROWS).cloned().collect::<Vec<_>>().join(", ");
        let more = offending.len().saturating_sub(MAX_LISTED_ROWS);
        let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
        return Err(Error::Data(format!(
            "{} responses exceed the truncation threshold {threshold}: {shown}{tail}",
            offending.len()
        )));
    }

    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut names = vec![INTERCEPT_NAME.to_string()];
    let mut blocks = Vec::new();
    for name in &spec.covariates {
        let c = table.column(name)?;
        let values = table.rows.iter().zip(&table.lines).map(|(row, &line)| parse_number(&row[c], line, name)).collect::<Result<_>>()?;
        blocks.push(CovariateBlock { name: name.clone(), columns: vec![columns.len()] });
        columns.push(values);
        names.push(name.clone());
    }
    for name in &spec.categoricals {
        let c = table.column(name)?;
        if let Some((_, &line)) = table.rows.iter().zip(&table.lines).find(|(row, _)| row[c].is_empty()) {
            return Err(Error::Parse { line, message: format!("column '{name}': empty category") });
        }
        let levels: BTreeSet<&str> = table.rows.iter().map(|row| row[c].as_str()).collect();
        let reference = match spec.reference_levels.get(name) {
            Some(r) if levels.contains(r.as_str()) => r.as_str(),
            Some(r) => return Err(Error::Data(format!("reference level '{r}' does not occur in column '{name}'"))),
            None => levels.iter().next().copied().unwrap_or_default(),
        };
        let start = columns.len();
        for level in levels.iter().filter(|&&l| l != reference) {
            columns.push(table.rows.iter().map(|row| if row[c] == *level { 1.0 } else { 0.0 }).collect());
            names.push(format!("{name}={level}"));
        }
        if columns.len() > start {
            blocks.push(CovariateBlock { name: name.clone(), columns: (start..columns.len()).collect() });
        }
    }
    let design = DMatrix::from_fn(n, columns.len(), |i, c| columns[c][i]);
    Dataset::with_names(responses, design, threshold, names, blocks)
}

/// Parses `text` and builds the dataset described by `spec`.
pub fn load_dataset(text: &str, spec: &DatasetSpec) -> Result<Dataset> {
    build_dataset(&parse_csv(text)?, spec)
}

/// Writes a dataset back as CSV with its design column names (intercept omitted).
pub fn dataset_to_csv(data: &Dataset, response: &str) -> String {
    let mut out = String::from(response);
    for name in &data.column_names()[1..] {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..data.n() {
        out.push_str(&data.responses()[i].to_string());
        for c in 1..data.k() {
            out.push(',');
            out.push_str(&data.design()[(i, c)].to_string());
        }
        out.push('\n');
    }
    out
}
