use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use rtpmix::diagnostics::{naive_dispersion_check, pearson_residuals, truncated_overdispersion_test, DispersionTestResult, NaiveDispersion};
use rtpmix::inference::{coefficient_table, CoefficientTable};
use rtpmix::io::{load_dataset, DatasetSpec};
use rtpmix::mixture::EmControl;
use rtpmix::selection::{
    backward_select, fit_multistart, score_model, select_components, Criterion, ModelScore, SelectionControl, SelectionRule,
    SelectionTrace,
};
use rtpmix::simlab::{run_estimation_study, run_selection_study, EstimationStudy, SelectionStudy, SimulationConfig, REPORT_SCHEMA_VERSION};
use rtpmix::{Dataset, Error};

use crate::{
    Cli, Command, CriterionArg, DataArgs, DispersionArgs, EmArgs, FitArgs, Format, OutputArgs, RuleArg, SelectArgs, SimulateArgs,
    StudyArg, EXIT_INPUT, EXIT_NONCONVERGENCE,
};

const DEFAULT_SEED: u64 = 1;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Fit(_) | Error::Numerical(_) | Error::RateOverflow { .. } => EXIT_NONCONVERGENCE,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Fit(args) => fit(args),
        Command::Select(args) => select(args, cli.threads),
        Command::Dispersion(args) => dispersion(args),
        Command::Simulate(args) => simulate(args, cli.threads),
    }
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("cannot read {}", args.input.display()))?;
    let spec = DatasetSpec {
        response: args.response.clone(),
        covariates: args.covariates.clone(),
        categoricals: args.categorical.clone(),
        threshold: args.threshold,
        reference_levels: args.reference.iter().cloned().collect::<BTreeMap<_, _>>(),
    };
    load_dataset(&text, &spec).with_context(|| format!("loading {}", args.input.display()))
}

fn em_control(args: &EmArgs) -> Result<EmControl> {
    let control = EmControl { eps_param: args.eps_param, eps_loglik: args.eps_loglik, max_iter: args.max_iter, ..EmControl::default() };
    control.validate()?;
    Ok(control)
}

fn emit(out: &OutputArgs, text: &str) -> Result<()> {
    match &out.output {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

#[derive(Serialize)]
struct GofSummary {
    statistic: f64,
    df: usize,
    p_value: f64,
    fraction_within_two: f64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    schema_version: u32,
    seed: u64,
    config: &'a FitArgs,
    n: usize,
    threshold: u32,
    converged: bool,
    iterations: usize,
    loglik: f64,
    n_params: usize,
    aic: f64,
    bic: f64,
    coefficients: CoefficientTable,
    gof: GofSummary,
    warnings: Vec<String>,
}

fn coefficient_csv(table: &CoefficientTable) -> String {
    let mut s = String::from("component,term,estimate,se,z,p_value\n");
    for r in &table.rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.component, r.term, r.estimate, csv_opt(r.se), csv_opt(r.z), csv_opt(r.p_value));
    }
    s
}

fn coefficient_text(table: &CoefficientTable) -> String {
    let mut s = format!("{:>4}  {:<24} {:>12} {:>12} {:>10} {:>10}\n", "comp", "term", "estimate", "se", "z", "p");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{:>4}  {:<24} {:>12.6} {:>12} {:>10} {:>10}",
            r.component,
            r.term,
            r.estimate,
            opt(r.se),
            r.z.map_or_else(|| "NA".into(), |z| format!("{z:.3}")),
            r.p_value.map_or_else(|| "NA".into(), |p| format!("{p:.4}")),
        );
    }
    if table.singular {
        let _ = writeln!(s, "warning: information matrix is singular (condition number {:.3e})", table.condition_number);
    }
    s
}

fn fit(args: &FitArgs) -> Result<u8> {
    let data = load(&args.data)?;
    let control = em_control(&args.em)?;
    let seed = args.em.seed.unwrap_or(DEFAULT_SEED);
    let fit = fit_multistart(&data, args.components, &control, args.em.starts, seed, &[])?;
    let score = score_model(&data, &fit);
    let coefficients = coefficient_table(&data, &fit.model)?;
    let residuals = pearson_residuals(&data, &fit.model)?;
    if let Some(path) = &args.residuals {
        fs::write(path, residuals.to_csv(data.responses())).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let mut warnings = fit.warnings.clone();
    if !fit.converged {
        warnings.push(format!("EM did not converge within {} iterations; estimates are provisional", fit.iterations));
    }
    let report = FitReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        config: args,
        n: data.n(),
        threshold: data.threshold(),
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: score.loglik,
        n_params: score.n_params,
        aic: score.aic,
        bic: score.bic,
        coefficients,
        gof: GofSummary {
            statistic: residuals.gof_statistic,
            df: residuals.gof_df,
            p_value: residuals.gof_p_value,
            fraction_within_two: residuals.fraction_within_two,
        },
        warnings,
    };
    let text = match args.out.format {
        Format::Json => json(&report)?,
        Format::Csv => coefficient_csv(&report.coefficients),
        Format::Table => {
            let mut s = format!(
                "Right-truncated Poisson mixture: J={} n={} threshold={} seed={}\n",
                args.components, report.n, report.threshold, seed
            );
            let _ = writeln!(s, "converged: {} after {} iterations", report.converged, report.iterations);
            let _ = writeln!(s, "log-likelihood {:.6}  parameters {}  AIC {:.4}  BIC {:.4}\n", report.loglik, report.n_params, report.aic, report.bic);
            s.push_str(&coefficient_text(&report.coefficients));
            let g = &report.gof;
            let _ = writeln!(s, "\nPearson GOF {:.4} on {} df, p = {:.4}; |residual| <= 2 for {:.1}%", g.statistic, g.df, g.p_value, 100.0 * g.fraction_within_two);
            for w in &report.warnings {
                let _ = writeln!(s, "warning: {w}");
            }
            s
        }
    };
    emit(&args.out, &text)?;
    Ok(if report.converged { 0 } else { EXIT_NONCONVERGENCE })
}

#[derive(Serialize)]
struct SelectReport<'a> {
    schema_version: u32,
    seed: u64,
    config: &'a SelectArgs,
    criterion: Criterion,
    rule: SelectionRule,
    candidates: Vec<Option<ModelScore>>,
    selected_components: usize,
    component_trace: SelectionTrace,
    kept: Vec<String>,
    dropped: Vec<String>,
    covariate_trace: SelectionTrace,
    converged: bool,
    coefficients: CoefficientTable,
}

fn criteria_csv(scores: &[Option<ModelScore>]) -> String {
    let mut s = String::from("components,loglik,n_params,aic,bic,converged\n");
    for (j, score) in scores.iter().enumerate() {
        match score {
            Some(m) => {
                let _ = writeln!(s, "{},{},{},{},{},{}", j + 1, m.loglik, m.n_params, m.aic, m.bic, m.converged);
            }
            None => {
                let _ = writeln!(s, "{},,,,,false", j + 1);
            }
        }
    }
    s
}

fn trace_text(title: &str, trace: &SelectionTrace) -> String {
    let mut s = format!("{title}\n");
    for e in &trace.entries {
        let _ = writeln!(s, "  {:<28} {:<10} {}", e.candidate, e.decision, e.reason);
    }
    s
}

fn select(args: &SelectArgs, threads: usize) -> Result<u8> {
    let data = load(&args.data)?;
    let seed = args.em.seed.unwrap_or(DEFAULT_SEED);
    let control = SelectionControl {
        em: em_control(&args.em)?,
        starts: args.em.starts,
        seed,
        threads,
        criterion: match args.criterion {
            CriterionArg::Aic => Criterion::Aic,
            CriterionArg::Bic => Criterion::Bic,
        },
        rule: match args.rule {
            RuleArg::Argmin => SelectionRule::Argmin,
            RuleArg::EarlyStop => SelectionRule::EarlyStop { relative: args.relative },
        },
    };
    let components = select_components(&data, args.max_components, &control)?;
    let backward = backward_select(&data, components.selected, args.alpha, &control)?;
    let coefficients = coefficient_table(&backward.data, &backward.fit.model)?;
    let report = SelectReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        config: args,
        criterion: control.criterion,
        rule: control.rule,
        candidates: components.scores.clone(),
        selected_components: components.selected,
        component_trace: components.trace.clone(),
        kept: backward.kept.clone(),
        dropped: backward.dropped.clone(),
        covariate_trace: backward.trace.clone(),
        converged: backward.fit.converged,
        coefficients,
    };
    let text = match args.out.format {
        Format::Json => json(&report)?,
        Format::Csv => criteria_csv(&report.candidates),
        Format::Table => {
            let mut s = format!("{:>2}  {:>14} {:>4} {:>14} {:>14}  converged\n", "J", "loglik", "d", "AIC", "BIC");
            for (j, c) in report.candidates.iter().enumerate() {
                match c {
                    Some(m) => {
                        let _ = writeln!(s, "{:>2}  {:>14.4} {:>4} {:>14.4} {:>14.4}  {}", j + 1, m.loglik, m.n_params, m.aic, m.bic, m.converged);
                    }
                    None => {
                        let _ = writeln!(s, "{:>2}  fit failed", j + 1);
                    }
                }
            }
            let _ = writeln!(s, "\nselected J = {} ({:?}, {:?})\n", report.selected_components, report.criterion, report.rule);
            s.push_str(&trace_text("covariate elimination:", &report.covariate_trace));
            let _ = writeln!(s, "kept: {}", if report.kept.is_empty() { "(intercept only)".to_string() } else { report.kept.join(", ") });
            let _ = writeln!(s, "dropped: {}\n", if report.dropped.is_empty() { "(none)".to_string() } else { report.dropped.join(", ") });
            s.push_str(&coefficient_text(&report.coefficients));
            s
        }
    };
    emit(&args.out, &text)?;
    Ok(if report.converged { 0 } else { EXIT_NONCONVERGENCE })
}

#[derive(Serialize)]
struct DispersionReport<'a> {
    schema_version: u32,
    config: &'a DispersionArgs,
    n: usize,
    threshold: u32,
    naive: NaiveDispersion,
    score_test: DispersionTestResult,
}

fn dispersion(args: &DispersionArgs) -> Result<u8> {
    let data = load(&args.data)?;
    let report = DispersionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: args,
        n: data.n(),
        threshold: data.threshold(),
        naive: naive_dispersion_check(data.responses())?,
        score_test: truncated_overdispersion_test(&data)?,
    };
    let text = match args.out.format {
        Format::Json => json(&report)?,
        Format::Csv => {
            let t = &report.score_test;
            let v = &report.naive;
            format!(
                "mean,variance,difference,statistic,p_value,method\n{},{},{},{},{},{}\n",
                v.mean, v.variance, v.difference, t.statistic, t.p_value, t.method
            )
        }
        Format::Table => {
            let v = &report.naive;
            let t = &report.score_test;
            format!(
                "naive check (ignores truncation and covariates): mean {:.4}, variance {:.4}, variance - mean {:.4}\n\
                 truncated overdispersion test ({}): statistic {:.4}, one-sided p = {:.4}\n",
                v.mean, v.variance, v.difference, t.method, t.statistic, t.p_value
            )
        }
    };
    emit(&args.out, &text)?;
    Ok(0)
}

#[derive(Serialize)]
struct SimulateReport {
    schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimation: Option<EstimationStudy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<SelectionStudy>,
}

fn simulate(args: &SimulateArgs, threads: usize) -> Result<u8> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), _) => SimulationConfig::preset(name).ok_or_else(|| {
            Error::InvalidParameter(format!("unknown preset '{name}'; expected one of {}", SimulationConfig::preset_names().join(", ")))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            SimulationConfig::from_json(&text).with_context(|| format!("loading {}", path.display()))?
        }
        (None, None) => return Err(anyhow!(Error::InvalidParameter("either --preset or --config is required".into()))),
    };
    config = config.clone().with_size(
        args.n.unwrap_or(config.n),
        args.replicates.unwrap_or(config.replicates),
        args.em.seed.unwrap_or(config.seed),
    );
    config.validate()?;
    let em = em_control(&args.em)?;
    let estimation = match args.study {
        StudyArg::Estimation | StudyArg::Both => Some(run_estimation_study(&config, &em, threads)?),
        StudyArg::Selection => None,
    };
    let selection = match args.study {
        StudyArg::Selection | StudyArg::Both => {
            let control = SelectionControl { em, starts: args.em.starts, seed: config.seed, ..SelectionControl::default() };
            Some(run_selection_study(&config, args.max_components, &control, threads)?)
        }
        StudyArg::Estimation => None,
    };
    let report = SimulateReport { schema_version: REPORT_SCHEMA_VERSION, estimation, selection };
    let text = match args.out.format {
        Format::Json => json(&report)?,
        Format::Csv => {
            let mut parts = Vec::new();
            if let Some(e) = &report.estimation {
                parts.push(e.metrics.to_csv());
            }
            if let Some(s) = &report.selection {
                parts.push(s.to_csv());
            }
            parts.join("\n")
        }
        Format::Table => {
            let mut s = format!("configuration {} (seed {}, n {}, replicates {})\n", config.name, config.seed, config.n, config.replicates);
            if let Some(e) = &report.estimation {
                let _ = writeln!(s, "\nestimation: {} of {} replicates converged{}", e.replicates.len() - e.non_converged, e.replicates.len(), if e.unreliable { " (unreliable)" } else { "" });
                let _ = writeln!(s, "{:<10} {:>10} {:>12} {:>12} {:>12}", "parameter", "true", "mean", "ReMSE", "RBias");
                for r in &e.metrics.rows {
                    let _ = writeln!(s, "{:<10} {:>10.4} {:>12.4} {:>12.4} {:>12.4}", r.parameter, r.true_value, r.mean, r.remse, r.rbias);
                }
            }
            if let Some(sel) = &report.selection {
                let _ = writeln!(s, "\nselection frequencies ({} failed replicates)", sel.failed);
                let _ = writeln!(s, "{:>2} {:>6} {:>6}", "J", "AIC", "BIC");
                for (j, c) in sel.counts.iter().enumerate() {
                    let _ = writeln!(s, "{:>2} {:>6} {:>6}", j + 1, c[0], c[1]);
                }
            }
            s
        }
    };
    emit(&args.out, &text)?;
    Ok(0)
}
