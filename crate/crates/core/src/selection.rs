//! Information criteria, choice of the number of components, and backward
//! elimination of covariate blocks by likelihood ratio tests.
//!
//! Every candidate model is fitted from several starting points and the
//! best log-likelihood is kept. Start 0 is the default k-means
//! initialisation on the covariates; start 1 clusters the covariates
//! together with the response; later starts use random partitions.
//!
//! Covariates are dropped from all components at once, and the columns of
//! one block (e.g. the dummies of a categorical variable) leave together.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::lr_test;
use crate::kmeans::{distinct_rows, kmeans, standardize};
use crate::mixture::{em_fit, initialize, initialize_from_labels, EmControl, MixtureFit, MixtureModel, KMEANS_RESTARTS};
use crate::simlab::{derive_seed, run_indexed};

pub const DEFAULT_STARTS: usize = 5;
pub const DEFAULT_RELATIVE_IMPROVEMENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest criterion among all candidates.
    Argmin,
    /// Stop at the first `J` whose criterion rises or falls by less than
    /// `relative` of the previous value, and keep `J - 1`.
    EarlyStop { relative: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionControl {
    pub em: EmControl,
    pub starts: usize,
    pub seed: u64,
    /// Worker threads for independent candidate fits; 0 uses all cores.
    pub threads: usize,
    pub criterion: Criterion,
    pub rule: SelectionRule,
}

impl Default for SelectionControl {
    fn default() -> Self {
        Self {
            em: EmControl::default(),
            starts: DEFAULT_STARTS,
            seed: 1,
            threads: 1,
            criterion: Criterion::Bic,
            rule: SelectionRule::Argmin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub components: usize,
    pub covariates: Vec<String>,
    pub loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
}

impl ModelScore {
    pub fn new(components: usize, covariates: Vec<String>, loglik: f64, n_params: usize, n: usize, converged: bool) -> Self {
        let d = n_params as f64;
        Self {
            components,
            covariates,
            loglik,
            n_params,
            aic: -2.0 * loglik + 2.0 * d,
            bic: -2.0 * loglik + d * (n as f64).ln(),
            converged,
        }
    }

    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
        }
    }
}

pub fn score_model(data: &Dataset, fit: &MixtureFit) -> ModelScore {
    ModelScore::new(
        fit.model.components(),
        data.column_names().to_vec(),
        fit.loglik(),
        fit.model.n_params(),
        data.n(),
        fit.converged,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub candidate: String,
    pub score: Option<ModelScore>,
    pub decision: String,
    pub reason: String,
}

/// Append-only log of the candidates examined by a selection procedure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub entries: Vec<TraceEntry>,
}

impl SelectionTrace {
    pub fn push(&mut self, candidate: impl Into<String>, score: Option<ModelScore>, decision: &str, reason: impl Into<String>) {
        self.entries.push(TraceEntry { candidate: candidate.into(), score, decision: decision.into(), reason: reason.into() });
    }
}

fn starting_model(data: &Dataset, components: usize, start: usize, rng: &mut ChaCha8Rng) -> Result<MixtureModel> {
    if start == 0 || components == 1 {
        return initialize(data, components, rng);
    }
    let labels = if start == 1 {
        // Covariates and response together, so components that overlap in x can still separate.
        let k = data.k();
        let mut raw = DMatrix::zeros(data.n(), k);
        for c in 1..k {
            raw.set_column(c - 1, &data.design().column(c));
        }
        for (i, &y) in data.responses().iter().enumerate() {
            raw[(i, k - 1)] = y as f64;
        }
        let points = standardize(&raw);
        if distinct_rows(&points) < components {
            return initialize(data, components, rng);
        }
        kmeans(&points, components, KMEANS_RESTARTS, rng)?.labels
    } else {
        (0..data.n()).map(|_| rng.random_range(0..components)).collect()
    };
    initialize_from_labels(data, components, &labels, rng)
}

fn better(a: &MixtureFit, b: &MixtureFit) -> bool {
    (a.converged, a.loglik()) > (b.converged, b.loglik()) && (a.converged || !b.converged)
}

/// Fits `components` components from `starts` starting points plus any
/// `extra` warm starts and keeps the best converged log-likelihood. If no
/// start converged, the best fit is resumed once from its last iterate.
pub fn fit_multistart(
    data: &Dataset,
    components: usize,
    em: &EmControl,
    starts: usize,
    seed: u64,
    extra: &[MixtureModel],
) -> Result<MixtureFit> {
    let starts = if components == 1 { 1 } else { starts.max(1) };
    let mut best: Option<MixtureFit> = None;
    let mut last_error = None;
    let warm = extra.iter().cloned().map(Some);
    for (s, start) in (0..starts).map(|_| None).chain(warm).enumerate() {
        let attempt = match start {
            Some(model) => em_fit(data, components, Some(model), em, 0),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, components as u64, s as u64));
                starting_model(data, components, s, &mut rng).and_then(|m| em_fit(data, components, Some(m), em, 0))
            }
        };
        match attempt {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| better(&fit, b)) {
                    best = Some(fit);
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_error.unwrap_or_else(|| Error::Fit("no starting point".into())))?;
    if best.converged {
        return Ok(best);
    }
    // Slow EM on a flat ridge can exhaust the budget while still climbing; resume once.
    match em_fit(data, components, Some(best.model.clone()), em, 0) {
        Ok(more) if more.loglik() >= best.loglik() => Ok(MixtureFit {
            loglik_trace: best.loglik_trace.iter().chain(&more.loglik_trace[1..]).copied().collect(),
            iterations: best.iterations + more.iterations,
            m_step_failures: best.m_step_failures + more.m_step_failures,
            ..more
        }),
        _ => Ok(best),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSelection {
    /// `scores[j - 1]` for `J = j`; `None` when that fit failed or was not attempted.
    pub scores: Vec<Option<ModelScore>>,
    pub fits: Vec<Option<MixtureFit>>,
    pub selected: usize,
    pub criterion: Criterion,
    pub rule: SelectionRule,
    pub trace: SelectionTrace,
}

impl ComponentSelection {
    /// The choice the configured rule would make under `criterion`.
    pub fn selected_by(&self, criterion: Criterion) -> Option<usize> {
        choose(&self.scores, criterion, self.rule)
    }

    pub fn selected_fit(&self) -> &MixtureFit {
        self.fits[self.selected - 1].as_ref().expect("selected candidate has a fit")
    }
}

fn choose(scores: &[Option<ModelScore>], criterion: Criterion, rule: SelectionRule) -> Option<usize> {
    let usable = |only_converged: bool| {
        scores.iter().flatten().filter(move |s| s.converged || !only_converged).map(|s| (s.components, s.value(criterion)))
    };
    let only_converged = scores.iter().flatten().any(|s| s.converged);
    match rule {
        SelectionRule::Argmin => usable(only_converged).min_by(|a, b| a.1.total_cmp(&b.1)).map(|(j, _)| j),
        SelectionRule::EarlyStop { relative } => {
            let mut prev: Option<(usize, f64)> = None;
            for (j, v) in usable(only_converged) {
                if let Some((pj, pv)) = prev {
                    if v >= pv || (pv - v) < relative * pv.abs() {
                        return Some(pj);
                    }
                }
                prev = Some((j, v));
            }
            prev.map(|(j, _)| j)
        }
    }
}

/// Fits `J = 1..=j_max` and picks the number of components by the control's criterion and rule.
pub fn select_components(data: &Dataset, j_max: usize, control: &SelectionControl) -> Result<ComponentSelection> {
    if j_max == 0 {
        return Err(Error::InvalidParameter("j_max must be at least 1".into()));
    }
    if let SelectionRule::EarlyStop { relative } = control.rule {
        if !(relative >= 0.0 && relative.is_finite()) {
            return Err(Error::InvalidParameter("relative improvement threshold must be non-negative".into()));
        }
    }
    let fit_one = |j: usize| fit_multistart(data, j, &control.em, control.starts, control.seed, &[]);
    let results: Vec<Result<MixtureFit>> = match control.rule {
        SelectionRule::Argmin => run_indexed(control.threads, j_max, |j| fit_one(j + 1))?,
        SelectionRule::EarlyStop { .. } => {
            // Sequential: later candidates are only fitted while the criterion keeps improving.
            let mut out = Vec::new();
            let mut scores: Vec<Option<ModelScore>> = Vec::new();
            for j in 1..=j_max {
                let r = fit_one(j);
                scores.push(r.as_ref().ok().map(|f| score_model(data, f)));
                out.push(r);
                if choose(&scores, control.criterion, control.rule).is_some_and(|s| s < j) {
                    break;
                }
            }
            out
        }
    };
    let mut trace = SelectionTrace::default();
    let mut scores = Vec::with_capacity(j_max);
    let mut fits = Vec::with_capacity(j_max);
    for (j, r) in results.into_iter().enumerate() {
        match r {
            Ok(fit) => {
                let s = score_model(data, &fit);
                let note = if fit.converged { String::new() } else { "did not converge".into() };
                trace.push(format!("J={}", j + 1), Some(s.clone()), "scored", note);
                scores.push(Some(s));
                fits.push(Some(fit));
            }
            Err(e) => {
                trace.push(format!("J={}", j + 1), None, "failed", e.to_string());
                scores.push(None);
                fits.push(None);
            }
        }
    }
    scores.resize(j_max, None);
    fits.resize(j_max, None);
    let selected = choose(&scores, control.criterion, control.rule)
        .ok_or_else(|| Error::Fit("every candidate number of components failed to fit".into()))?;
    let chosen = scores[selected - 1].clone();
    trace.push(format!("J={selected}"), chosen, "selected", format!("{:?} with {:?}", control.criterion, control.rule));
    Ok(ComponentSelection { scores, fits, selected, criterion: control.criterion, rule: control.rule, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSelection {
    /// Remaining covariate blocks.
    pub kept: Vec<String>,
    /// Dropped blocks in removal order.
    pub dropped: Vec<String>,
    pub data: Dataset,
    pub fit: MixtureFit,
    pub full_loglik: f64,
    pub trace: SelectionTrace,
}

/// Warm start for a nested model: the current estimates without the dropped columns.
fn restrict(model: &MixtureModel, keep_cols: &[usize]) -> Result<MixtureModel> {
    MixtureModel::new(model.weights().to_vec(), model.coefficients().select_columns(keep_cols), model.threshold())
}

/// Repeatedly removes the block with the largest LR p-value while that p-value exceeds `alpha`.
pub fn backward_select(data: &Dataset, components: usize, alpha: f64, control: &SelectionControl) -> Result<BackwardSelection> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut trace = SelectionTrace::default();
    let mut current_data = data.clone();
    let mut current = fit_multistart(data, components, &control.em, control.starts, control.seed, &[])?;
    let full_loglik = current.loglik();
    let all_blocks: Vec<String> = data.blocks().iter().map(|b| b.name.clone()).collect();
    trace.push("full model", Some(score_model(data, &current)), "fitted", all_blocks.join(", "));
    let mut kept = all_blocks;
    let mut dropped = Vec::new();
    loop {
        let candidates = run_indexed(control.threads, kept.len(), |b| -> Result<(MixtureFit, Dataset, f64, usize)> {
            let keep: Vec<String> = kept.iter().enumerate().filter(|&(i, _)| i != b).map(|(_, s)| s.clone()).collect();
            let reduced = data.with_blocks(&keep)?;
            let block = &current_data.blocks()[b];
            let keep_cols: Vec<usize> = (0..current_data.k()).filter(|c| !block.columns.contains(c)).collect();
            let warm = restrict(&current.model, &keep_cols)?;
            let fit = fit_multistart(&reduced, components, &control.em, control.starts, control.seed, &[warm])?;
            if !fit.converged {
                return Err(Error::Fit("reduced fit did not converge".into()));
            }
            let df = components * block.columns.len();
            let p = lr_test(current.loglik(), fit.loglik(), df)?.p_value;
            Ok((fit, reduced, p, df))
        })?;
        let mut best: Option<(usize, f64)> = None;
        for (b, c) in candidates.iter().enumerate() {
            match c {
                Ok((fit, reduced, p, df)) => {
                    trace.push(
                        format!("drop {}", kept[b]),
                        Some(score_model(reduced, fit)),
                        "tested",
                        format!("LR p-value {p:.6} on {df} df"),
                    );
                    if *p > alpha && best.is_none_or(|(_, bp)| *p > bp) {
                        best = Some((b, *p));
                    }
                }
                Err(e) => trace.push(format!("drop {}", kept[b]), None, "skipped", e.to_string()),
            }
        }
        let Some((b, p)) = best else { break };
        let (fit, reduced, _, _) = candidates.into_iter().nth(b).expect("index in range").expect("candidate succeeded");
        let name = kept.remove(b);
        trace.push(format!("drop {name}"), Some(score_model(&reduced, &fit)), "dropped", format!("p-value {p:.6} > alpha {alpha}"));
        dropped.push(name);
        current = fit;
        current_data = reduced;
        if kept.is_empty() {
            break;
        }
    }
    trace.push(
        "final model",
        Some(score_model(&current_data, &current)),
        "selected",
        format!("every remaining block has p-value at most {alpha}"),
    );
    Ok(BackwardSelection { kept, dropped, data: current_data, fit: current, full_loglik, trace })
}
