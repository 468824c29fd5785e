//! The four subcommands. Each `run_*` returns a typed result; the `cmd_*`
//! wrappers turn that into an exit code with the message on stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use sesa_core::baselines::{knn_impute, mean_impute, median_impute};
use sesa_core::dataset::{
    encode_ordinal, format_value, load_csv, load_variable_specs, snap_ordinal, write_bool_csv, write_csv,
};
use sesa_core::fiml::{conditional_impute_ridge, em_fit};
use sesa_core::metrics::{evaluate, Aggregate};
use sesa_core::missingness::apply_mcar;
use sesa_core::notears::{notears_fit, suggest_spec, threshold_dag};
use sesa_core::rng::derive_seed;
use sesa_core::sem::parse_spec;
use sesa_core::training::{impute, impute_with_truth};
use sesa_core::{
    Dataset, EvalOptions, EvaluationReport, ImputeReport, LoadOptions, MaskPlan, SemSpec, TrainMode, VariableSpec,
};

use crate::config::{Method, Overrides, ReportFormat, RunConfig};
use crate::error::CliError;

pub const TOOL: &str = "sesa";

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Args)]
pub struct ImputeArgs {
    /// CSV with missing cells (empty, NA or NaN).
    #[arg(long)]
    pub input: PathBuf,
    /// JSON variable specs; all columns continuous when omitted.
    #[arg(long)]
    pub variables: Option<PathBuf>,
    /// Path model, one `Y ~ X1 + X2` per line.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "imputed")]
    pub prefix: String,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Complete ground-truth CSV.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub variables: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Report path (JSON or CSV per --format).
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct DiscoverArgs {
    /// Complete or pre-imputed CSV; missing cells are FIML-filled first.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub variables: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "graph")]
    pub prefix: String,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Complete CSV to mask.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub variables: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "masked")]
    pub prefix: String,
    #[command(flatten)]
    pub flags: Overrides,
}

/// Header shared by every JSON artifact.
#[derive(Debug, Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Inputs,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Default, Serialize)]
struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variables: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<PathBuf>,
}

fn envelope<'a, T: Serialize>(command: &'static str, cfg: &'a RunConfig, inputs: Inputs, body: T) -> Envelope<'a, T> {
    Envelope {
        tool: TOOL,
        version: sesa_core::VERSION,
        command,
        seed: cfg.seed,
        config: cfg,
        inputs,
        body,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn header_specs(path: &Path) -> Result<Vec<VariableSpec>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(header.iter().map(|h| VariableSpec::continuous(h.trim())).collect())
}

/// Loads a CSV against its variable specs and encodes ordinal labels.
pub fn load_table(data: &Path, variables: Option<&Path>) -> Result<Dataset> {
    let specs = match variables {
        Some(v) => load_variable_specs(v)?,
        None => header_specs(data)?,
    };
    let ds = load_csv(data, &specs, &LoadOptions::default())?;
    Ok(encode_ordinal(&ds)?)
}

fn load_spec(path: Option<&Path>) -> Result<Option<SemSpec>> {
    path.map(|p| {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        Ok(parse_spec(&text)?)
    })
    .transpose()
}

fn exit_code(r: Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------- impute

#[derive(Debug, Serialize)]
struct ImputeBody<'a> {
    outputs: Vec<PathBuf>,
    report: &'a ImputeReport,
}

/// Writes `<prefix>.csv`, `<prefix>.provenance.csv` (1 = imputed) and
/// `<prefix>.report.json`; returns their paths.
pub fn run_impute(a: &ImputeArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.impute.train.mode == TrainMode::Benchmark {
        return Err(CliError::Input(
            "benchmark mode needs ground truth; use `evaluate --mode benchmark`".into(),
        ));
    }
    let ds = load_table(&a.input, a.variables.as_deref())?;
    let spec = load_spec(a.spec.as_deref())?;
    let (out, report) = impute(&ds, spec.as_ref(), &cfg.impute)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }

    let data_path = a.out_dir.join(format!("{}.csv", a.prefix));
    let prov_path = a.out_dir.join(format!("{}.provenance.csv", a.prefix));
    let report_path = a.out_dir.join(format!("{}.report.json", a.prefix));
    let mut w = create(&data_path)?;
    write_csv(&out, &mut w, cfg.labels)?;
    let mut w = create(&prov_path)?;
    write_bool_csv(&out.names(), &report.provenance, &mut w)?;
    let outputs = vec![data_path, prov_path, report_path.clone()];
    let inputs = Inputs {
        data: Some(a.input.clone()),
        variables: a.variables.clone(),
        spec: a.spec.clone(),
    };
    let body = ImputeBody {
        outputs: outputs.clone(),
        report: &report,
    };
    write_json(&report_path, &envelope("impute", cfg, inputs, body))?;
    log::info!("imputed {} cells in {} epochs", report.imputed_cells, report.epochs);
    Ok(outputs)
}

pub fn cmd_impute(a: &ImputeArgs, cfg: &RunConfig) -> i32 {
    exit_code(run_impute(a, cfg).map(drop))
}

// -------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateBody {
    pub trials: Vec<EvaluationReport>,
    /// Unweighted mean of the per-trial aggregates; present for `trials > 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_of_trials: Option<Aggregate>,
}

/// Seed of trial `t`: the master seed itself for a single trial.
pub fn trial_seed(cfg: &RunConfig, t: usize) -> u64 {
    if cfg.trials == 1 {
        cfg.seed
    } else {
        derive_seed(cfg.seed, t as u64)
    }
}

fn run_trial(truth: &Dataset, spec: Option<&SemSpec>, method: &Method, seed: u64, cfg: &RunConfig) -> Result<EvaluationReport> {
    let plan = MaskPlan::new(cfg.missing_rate, seed).with_scope(cfg.columns.iter().cloned());
    let m = apply_mcar(truth, &plan)?;
    let imputed = match method {
        Method::Mean => snap_ordinal(&mean_impute(&m.masked)?.data),
        Method::Median => snap_ordinal(&median_impute(&m.masked)?.data),
        Method::Knn => snap_ordinal(&knn_impute(&m.masked, cfg.knn_k)?.data),
        Method::Sesa => {
            let mut ic = cfg.impute.clone();
            ic.train.seed = seed;
            impute_with_truth(&m.masked, spec, Some(&m.truth), &ic)?.0
        }
        Method::External(path) => {
            let ext = encode_ordinal(&load_csv(path, truth.specs(), &LoadOptions::default())?)?;
            if !ext.is_complete() {
                return Err(CliError::Input(format!("{}: imputed file still has missing cells", path.display())));
            }
            ext
        }
    };
    let eval_mask = m.masked.mask().map(|observed| !observed);
    let opts = EvalOptions {
        method: cfg.method.clone(),
        seed: Some(seed),
        rate: Some(cfg.missing_rate),
        effect_size: cfg.effect_size,
        wilcoxon_cells: cfg.wilcoxon_cells,
    };
    Ok(evaluate(&imputed, truth, &eval_mask, truth.n_rows(), &opts)?)
}

fn mean_aggregate(reports: &[EvaluationReport]) -> Aggregate {
    let k = reports.len() as f64;
    let mean_opt = |f: fn(&Aggregate) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(&r.aggregate)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Aggregate {
        rmse: reports.iter().map(|r| r.aggregate.rmse).sum::<f64>() / k,
        mape_pct: mean_opt(|a| a.mape_pct),
        r2: mean_opt(|a| a.r2),
        wasserstein: reports.iter().map(|r| r.aggregate.wasserstein).sum::<f64>() / k,
    }
}

/// Masks the truth, imputes with the configured method and scores it, once
/// per trial. Trials run concurrently; the report is assembled in order.
pub fn evaluate_trials(truth: &Dataset, spec: Option<&SemSpec>, cfg: &RunConfig) -> Result<EvaluateBody> {
    let method = Method::parse(&cfg.method)?;
    if matches!(method, Method::External(_)) && cfg.trials > 1 {
        return Err(CliError::Input("an external imputation covers a single trial".into()));
    }
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(truth, spec, &method, trial_seed(cfg, t), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mean_of_trials = (trials.len() > 1).then(|| mean_aggregate(&trials));
    Ok(EvaluateBody { trials, mean_of_trials })
}

fn evaluation_csv(body: &EvaluateBody) -> Result<String> {
    let mut out = String::new();
    for (t, r) in body.trials.iter().enumerate() {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).expect("csv writer emits utf-8");
        for (k, line) in text.lines().enumerate() {
            if k == 0 {
                if t == 0 {
                    out.push_str(&format!("trial,seed,{line}\n"));
                }
            } else {
                out.push_str(&format!("{t},{},{line}\n", r.seed.unwrap_or_default()));
            }
        }
    }
    if let Some(a) = &body.mean_of_trials {
        let opt = |v: Option<f64>| v.map(format_value).unwrap_or_default();
        let mut row = vec![
            "mean".to_string(),
            String::new(),
            "aggregate".into(),
            String::new(),
            format_value(a.rmse),
            opt(a.mape_pct),
            opt(a.r2),
            format_value(a.wasserstein),
        ];
        row.extend(std::iter::repeat_n(String::new(), 7));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Writes the report to `output`; CSV reports get a `<output>.meta.json`
/// sidecar carrying version, config and seed.
pub fn run_evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<EvaluateBody> {
    let truth = load_table(&a.truth, a.variables.as_deref())?;
    let spec = load_spec(a.spec.as_deref())?;
    let body = evaluate_trials(&truth, spec.as_ref(), cfg)?;
    let inputs = Inputs {
        data: Some(a.truth.clone()),
        variables: a.variables.clone(),
        spec: a.spec.clone(),
    };
    match cfg.format {
        ReportFormat::Json => write_json(&a.output, &envelope("evaluate", cfg, inputs, &body))?,
        ReportFormat::Csv => {
            write_text(&a.output, &evaluation_csv(&body)?)?;
            let meta = sidecar(&a.output, "meta.json");
            write_json(&meta, &envelope("evaluate", cfg, inputs, serde_json::json!({})))?;
        }
    }
    Ok(body)
}

pub fn cmd_evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> i32 {
    exit_code(run_evaluate(a, cfg).map(drop))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

// -------------------------------------------------------------- discover

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// No missing cells: raw complete data or an imputed table.
    Complete,
    /// Missing cells were filled by FIML conditional means before fitting.
    FimlImputed,
}

#[derive(Debug, Serialize)]
struct Edge<'a> {
    from: &'a str,
    to: &'a str,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct DiscoverBody<'a> {
    input_kind: InputKind,
    cells_imputed: usize,
    converged: bool,
    /// Set when the augmented Lagrangian stopped before reaching `h_tol`;
    /// the graph is then a best-effort result.
    warning: bool,
    warnings: &'a [String],
    h: f64,
    rho: f64,
    outer_iterations: usize,
    threshold: f64,
    edges: Vec<Edge<'a>>,
    weighted: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    suggested_spec: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DiscoverOutcome {
    pub outputs: Vec<PathBuf>,
    pub input_kind: InputKind,
    pub edges: Vec<(String, String)>,
}

/// Writes `<prefix>.json`, `<prefix>.dot` and, with `suggest_outcome`,
/// `<prefix>.sem`.
pub fn run_discover(a: &DiscoverArgs, cfg: &RunConfig) -> Result<DiscoverOutcome> {
    let ds = load_table(&a.input, a.variables.as_deref())?;
    let (data, input_kind) = if ds.is_complete() {
        (ds.clone(), InputKind::Complete)
    } else {
        let em = em_fit(&ds, &cfg.impute.em)?;
        let filled = conditional_impute_ridge(&em.params, &ds, cfg.impute.em.ridge)?;
        (filled.data, InputKind::FimlImputed)
    };
    let fit = notears_fit(&data, &cfg.notears)?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let dag = threshold_dag(&fit.graph, cfg.notears.threshold)?;

    let json_path = a.out_dir.join(format!("{}.json", a.prefix));
    let dot_path = a.out_dir.join(format!("{}.dot", a.prefix));
    let mut outputs = vec![json_path.clone(), dot_path.clone()];
    let suggested_spec = match &cfg.suggest_outcome {
        Some(outcome) => {
            let spec = suggest_spec(&dag, Some(outcome))?;
            if spec.is_empty() {
                log::warn!("'{outcome}' has no parents in the thresholded graph; suggested model is empty");
            }
            let path = a.out_dir.join(format!("{}.sem", a.prefix));
            let text = format!(
                "# {TOOL} {} discover: ancestors of {outcome}, threshold {}, seed {}\n{}",
                sesa_core::VERSION,
                cfg.notears.threshold,
                cfg.seed,
                spec.to_text()
            );
            write_text(&path, &text)?;
            outputs.push(path.clone());
            Some(path)
        }
        None => None,
    };

    let names = &dag.names;
    let edge_list = dag.edges();
    let body = DiscoverBody {
        input_kind,
        cells_imputed: ds.n_missing(),
        converged: fit.converged,
        warning: !fit.converged,
        warnings: &fit.warnings,
        h: fit.h,
        rho: fit.rho,
        outer_iterations: fit.outer_iterations,
        threshold: cfg.notears.threshold,
        edges: edge_list
            .iter()
            .map(|&(i, j)| Edge {
                from: &names[i],
                to: &names[j],
                weight: dag.strengths()[(i, j)],
            })
            .collect(),
        weighted: serde_json::from_str(&fit.graph.to_json(None)?)?,
        suggested_spec,
    };
    let inputs = Inputs {
        data: Some(a.input.clone()),
        variables: a.variables.clone(),
        spec: None,
    };
    write_json(&json_path, &envelope("discover", cfg, inputs, body))?;
    let dot = format!(
        "// {TOOL} {} discover: threshold {}, seed {}\n{}",
        sesa_core::VERSION,
        cfg.notears.threshold,
        cfg.seed,
        dag.to_dot()
    );
    write_text(&dot_path, &dot)?;
    Ok(DiscoverOutcome {
        outputs,
        input_kind,
        edges: edge_list.iter().map(|&(i, j)| (names[i].clone(), names[j].clone())).collect(),
    })
}

pub fn cmd_discover(a: &DiscoverArgs, cfg: &RunConfig) -> i32 {
    exit_code(run_discover(a, cfg).map(drop))
}

// -------------------------------------------------------------- simulate

#[derive(Debug, Serialize)]
struct SimulateBody {
    cells_masked: usize,
    outputs: Vec<PathBuf>,
}

/// Writes `<prefix>.csv` (hidden cells empty), `<prefix>.mask.csv`
/// (1 = hidden) and `<prefix>.run.json`.
pub fn run_simulate(a: &SimulateArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_table(&a.input, a.variables.as_deref())?;
    let plan = MaskPlan::new(cfg.missing_rate, cfg.seed).with_scope(cfg.columns.iter().cloned());
    let m = apply_mcar(&ds, &plan)?;
    let hidden = m.masked.mask().map(|observed| !observed);

    let data_path = a.out_dir.join(format!("{}.csv", a.prefix));
    let mask_path = a.out_dir.join(format!("{}.mask.csv", a.prefix));
    let run_path = a.out_dir.join(format!("{}.run.json", a.prefix));
    let mut w = create(&data_path)?;
    write_csv(&m.masked, &mut w, cfg.labels)?;
    let mut w = create(&mask_path)?;
    write_bool_csv(&ds.names(), &hidden, &mut w)?;
    let outputs = vec![data_path, mask_path, run_path.clone()];
    let inputs = Inputs {
        data: Some(a.input.clone()),
        variables: a.variables.clone(),
        spec: None,
    };
    let body = SimulateBody {
        cells_masked: m.masked.n_missing(),
        outputs: outputs.clone(),
    };
    write_json(&run_path, &envelope("simulate", cfg, inputs, body))?;
    Ok(outputs)
}

pub fn cmd_simulate(a: &SimulateArgs, cfg: &RunConfig) -> i32 {
    exit_code(run_simulate(a, cfg).map(drop))
}
