//! Imputation quality metrics and the per-variable evaluation report.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::dataset::{format_value, Dataset};
use crate::error::{Error, Result};

/// Largest pair count for which the exact null distribution is used.
pub const EXACT_MAX_PAIRS: usize = 25;
/// Truth values with smaller magnitude are skipped by MAPE.
pub const MAPE_ZERO: f64 = 1e-12;

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric of an empty sample"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub pct: f64,
    /// Pairs dropped because the truth was (numerically) zero.
    pub skipped: usize,
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape> {
    check_pair(pred, truth)?;
    let mut sum = 0.0;
    let mut kept = 0;
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() < MAPE_ZERO {
            continue;
        }
        sum += ((p - t) / t).abs();
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::invalid("MAPE undefined: every truth value is zero"));
    }
    Ok(Mape {
        pct: 100.0 * sum / kept as f64,
        skipped: pred.len() - kept,
    })
}

/// `1 − SS_res / SS_tot`; may be negative.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("R² undefined: truth has zero variance"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Order-1 Wasserstein distance between two empirical distributions,
/// `∫|F_a(x) − F_b(x)| dx`, computed exactly by a merge over sorted samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Wasserstein distance of an empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < na || j < nb {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        // CDFs are constant on [prev, x).
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        total += (fa - fb).abs() * (x - prev);
        while i < na && a[i] == x {
            i += 1;
        }
        while j < nb && b[j] == x {
            j += 1;
        }
        prev = x;
    }
    Ok(total)
}

/// Ranks `1..=n` of `values`, ties sharing the mean of their positions.
/// Returned doubled so midranks stay integral.
fn doubled_midranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
    let mut ranks = vec![0; n];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end; doubled mean = start + 1 + end.
        let r2 = (start + 1 + end) as u64;
        for &k in &order[start..end] {
            ranks[k] = r2;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Exact two-sided p-value for the positive rank sum, given doubled ranks:
/// `min(1, 2·min(P(S ≤ w), P(S ≥ w)))` under equally likely sign patterns.
pub fn wilcoxon_p_exact(doubled_ranks: &[u64], doubled_statistic: u64) -> Result<f64> {
    let n = doubled_ranks.len();
    if n > EXACT_MAX_PAIRS {
        return Err(Error::invalid(format!("exact Wilcoxon limited to {EXACT_MAX_PAIRS} pairs")));
    }
    let max: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; max as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w = doubled_statistic.min(max) as usize;
    let lower: u64 = counts[..=w].iter().sum();
    let upper: u64 = counts[w..].iter().sum();
    Ok(two_sided(lower, upper, n))
}

fn two_sided(lower: u64, upper: u64, n: usize) -> f64 {
    let total = 2f64.powi(n as i32);
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

/// Normal approximation with tie-corrected variance and a continuity
/// correction of ½.
pub fn wilcoxon_p_normal(n: usize, statistic: f64, tie_sizes: &[usize]) -> f64 {
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let tie: f64 = tie_sizes.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((statistic - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSize {
    /// `W / √N` with `N` the dataset sample size.
    #[default]
    StatisticOverRootN,
    /// `|Z| / √n_pairs` from the normal approximation.
    ZOverRootPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub effect_size: f64,
    /// 95% t-interval for the mean of the predictions.
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub n_pairs: usize,
    pub zeros_dropped: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1 by convention.
    pub degenerate: bool,
}

/// 95% Student-t interval for the mean of `xs`.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, m);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    (m - half, m + half)
}

pub fn effect_size(statistic: f64, sample_size: usize) -> f64 {
    statistic / (sample_size as f64).sqrt()
}

/// Signed-rank test on `pred − truth`. Zero differences are dropped; the
/// p-value is exact up to [`EXACT_MAX_PAIRS`] pairs, normal beyond.
pub fn wilcoxon_signed_rank(pred: &[f64], truth: &[f64], sample_size: usize, es: EffectSize) -> Result<WilcoxonResult> {
    check_pair(pred, truth)?;
    if sample_size == 0 {
        return Err(Error::invalid("sample size must be ≥ 1"));
    }
    let diffs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).filter(|d| *d != 0.0).collect();
    let zeros_dropped = pred.len() - diffs.len();
    let (ci_lower, ci_upper) = mean_ci95(pred);
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            effect_size: 0.0,
            ci_lower,
            ci_upper,
            n_pairs: 0,
            zeros_dropped,
            exact: true,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_midranks(&abs);
    let w2: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let statistic = w2 as f64 / 2.0;
    let exact = n <= EXACT_MAX_PAIRS;
    let p_value = if exact {
        wilcoxon_p_exact(&ranks, w2)?
    } else {
        wilcoxon_p_normal(n, statistic, &ties)
    };
    let effect_size = match es {
        EffectSize::StatisticOverRootN => effect_size(statistic, sample_size),
        EffectSize::ZOverRootPairs => {
            let nf = n as f64;
            let tie: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
            if var > 0.0 {
                (statistic - nf * (nf + 1.0) / 4.0).abs() / var.sqrt() / nf.sqrt()
            } else {
                0.0
            }
        }
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        effect_size,
        ci_lower,
        ci_upper,
        n_pairs: n,
        zeros_dropped,
        exact,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonCells {
    /// Only the evaluated (imputed) cells.
    #[default]
    Evaluated,
    /// The whole column; observed cells contribute zero differences.
    WholeColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub method: String,
    pub seed: Option<u64>,
    pub rate: Option<f64>,
    pub effect_size: EffectSize,
    pub wilcoxon_cells: WilcoxonCells,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            method: "unnamed".into(),
            seed: None,
            rate: None,
            effect_size: EffectSize::default(),
            wilcoxon_cells: WilcoxonCells::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub name: String,
    pub n_cells: usize,
    pub rmse: f64,
    /// `None` when every truth value is zero.
    pub mape_pct: Option<f64>,
    pub mape_skipped: usize,
    /// `None` when the truth has zero variance.
    pub r2: Option<f64>,
    pub wasserstein: f64,
    pub wilcoxon: WilcoxonResult,
}

/// Unweighted means over variables; optional metrics average the variables
/// where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rmse: f64,
    pub mape_pct: Option<f64>,
    pub r2: Option<f64>,
    pub wasserstein: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub seed: Option<u64>,
    pub rate: Option<f64>,
    pub sample_size: usize,
    pub per_variable: Vec<VariableMetrics>,
    pub aggregate: Aggregate,
    /// Variables with no evaluated cells.
    pub excluded: Vec<String>,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Scores `imputed` against `truth` on the cells flagged in `mask`, one
/// record per variable plus their unweighted mean.
pub fn evaluate(
    imputed: &Dataset,
    truth: &Dataset,
    mask: &DMatrix<bool>,
    sample_size: usize,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    let shape = truth.values().shape();
    if imputed.values().shape() != shape || mask.shape() != shape {
        return Err(Error::shape("imputed data, truth and mask must share a shape"));
    }
    if imputed.names() != truth.names() {
        return Err(Error::HeaderMismatch("imputed and truth columns differ".into()));
    }
    for (i, j) in crate::dataset::cells(mask) {
        if mask[(i, j)] && (!imputed.is_observed(i, j) || !truth.is_observed(i, j)) {
            return Err(Error::invalid(format!("evaluated cell ({}, {}) has no value", i + 1, j + 1)));
        }
    }
    let names = truth.names();
    let results: Vec<Option<Result<VariableMetrics>>> = (0..shape.1)
        .into_par_iter()
        .map(|j| {
            let rows: Vec<usize> = (0..shape.0).filter(|&i| mask[(i, j)]).collect();
            if rows.is_empty() {
                return None;
            }
            let pred: Vec<f64> = rows.iter().map(|&i| imputed.values()[(i, j)]).collect();
            let tru: Vec<f64> = rows.iter().map(|&i| truth.values()[(i, j)]).collect();
            Some(score_variable(&names[j], &pred, &tru, imputed, truth, j, sample_size, opts))
        })
        .collect();

    let mut per_variable = Vec::new();
    let mut excluded = Vec::new();
    for (j, r) in results.into_iter().enumerate() {
        match r {
            None => excluded.push(names[j].clone()),
            Some(r) => per_variable.push(r?),
        }
    }
    if per_variable.is_empty() {
        return Err(Error::invalid("no evaluated cells"));
    }
    let k = per_variable.len() as f64;
    let aggregate = Aggregate {
        rmse: per_variable.iter().map(|v| v.rmse).sum::<f64>() / k,
        mape_pct: mean_defined(per_variable.iter().map(|v| v.mape_pct)),
        r2: mean_defined(per_variable.iter().map(|v| v.r2)),
        wasserstein: per_variable.iter().map(|v| v.wasserstein).sum::<f64>() / k,
    };
    Ok(EvaluationReport {
        method: opts.method.clone(),
        seed: opts.seed,
        rate: opts.rate,
        sample_size,
        per_variable,
        aggregate,
        excluded,
    })
}

#[allow(clippy::too_many_arguments)]
fn score_variable(
    name: &str,
    pred: &[f64],
    tru: &[f64],
    imputed: &Dataset,
    truth: &Dataset,
    j: usize,
    sample_size: usize,
    opts: &EvalOptions,
) -> Result<VariableMetrics> {
    let (mape_pct, mape_skipped) = match mape(pred, tru) {
        Ok(m) => (Some(m.pct), m.skipped),
        Err(_) => (None, pred.len()),
    };
    let wilcoxon = match opts.wilcoxon_cells {
        WilcoxonCells::Evaluated => wilcoxon_signed_rank(pred, tru, sample_size, opts.effect_size)?,
        WilcoxonCells::WholeColumn => {
            let all_p: Vec<f64> = imputed.values().column(j).iter().copied().collect();
            let all_t: Vec<f64> = truth.values().column(j).iter().copied().collect();
            wilcoxon_signed_rank(&all_p, &all_t, sample_size, opts.effect_size)?
        }
    };
    Ok(VariableMetrics {
        name: name.to_string(),
        n_cells: pred.len(),
        rmse: rmse(pred, tru)?,
        mape_pct,
        mape_skipped,
        r2: r2(pred, tru).ok(),
        wasserstein: wasserstein_1d(pred, tru)?,
        wilcoxon,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(format_value).unwrap_or_default()
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per variable plus a final `aggregate` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "variable",
            "n_cells",
            "rmse",
            "mape_pct",
            "r2",
            "wasserstein",
            "wilcoxon_statistic",
            "p_value",
            "effect_size",
            "ci_lower",
            "ci_upper",
            "n_pairs",
            "zeros_dropped",
        ])?;
        for v in &self.per_variable {
            let x = &v.wilcoxon;
            w.write_record([
                v.name.clone(),
                v.n_cells.to_string(),
                format_value(v.rmse),
                opt(v.mape_pct),
                opt(v.r2),
                format_value(v.wasserstein),
                format_value(x.statistic),
                format_value(x.p_value),
                format_value(x.effect_size),
                format_value(x.ci_lower),
                format_value(x.ci_upper),
                x.n_pairs.to_string(),
                x.zeros_dropped.to_string(),
            ])?;
        }
        let a = &self.aggregate;
        let mut row = vec![
            "aggregate".to_string(),
            String::new(),
            format_value(a.rmse),
            opt(a.mape_pct),
            opt(a.r2),
            format_value(a.wasserstein),
        ];
        row.extend(std::iter::repeat_n(String::new(), 7));
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::Io {
            path: "<csv output>".into(),
            source: e,
        })?;
        Ok(())
    }
}
