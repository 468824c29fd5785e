//! Full-information maximum likelihood for a multivariate normal under
//! missing data.
//!
//! The observed-data likelihood integrates the missing coordinates out of
//! each row analytically: a row with observed index set `O` contributes
//! `log N(x_O; mu_O, Sigma_OO)`. Rows are grouped by missingness pattern so
//! each sub-covariance is factored once per pattern.
//!
//! Parameters are estimated by EM. The E-step replaces missing blocks by
//! their conditional means and adds the conditional covariance to the
//! second-moment accumulator; the M-step takes ML moments (denominator `n`).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{pairwise_stats, Dataset, Imputation};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_ridge, log_det, submatrix, subvector, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Allowed log-likelihood decrease between EM iterations, relative to
/// `max(1, |loglik|)`.
const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl MvnParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::shape(format!("mu has {d} entries but sigma is {:?}", sigma.shape())));
        }
        Ok(MvnParams { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn max_abs_diff(&self, other: &MvnParams) -> f64 {
        let m = (&self.mu - &other.mu).amax();
        let s = (&self.sigma - &other.sigma).amax();
        m.max(s)
    }

    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        self.sigma[(a, b)] / (self.sigma[(a, a)] * self.sigma[(b, b)]).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change of the observed-data log-likelihood that stops EM.
    pub tol: f64,
    /// EM also keeps going until no entry of `mu` or `sigma` moves by more
    /// than this in one iteration, so the result is a fixed point.
    pub param_tol: f64,
    pub ridge: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-6,
            param_tol: 1e-9,
            ridge: 1e-6,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 || !(self.tol > 0.0) || !(self.param_tol >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::invalid(format!("bad EM config {self:?}")));
        }
        Ok(())
    }
}

/// Rows sharing one missingness pattern.
#[derive(Debug, Clone)]
pub(crate) struct Pattern {
    pub obs: Vec<usize>,
    pub mis: Vec<usize>,
    pub rows: Vec<usize>,
}

pub(crate) fn patterns(ds: &Dataset) -> Vec<Pattern> {
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for i in 0..ds.n_rows() {
        let key: Vec<bool> = (0..ds.n_cols()).map(|j| ds.is_observed(i, j)).collect();
        groups.entry(key).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(key, rows)| Pattern {
            obs: (0..key.len()).filter(|&j| key[j]).collect(),
            mis: (0..key.len()).filter(|&j| !key[j]).collect(),
            rows,
        })
        .collect()
}

fn row_block(ds: &Dataset, row: usize, cols: &[usize]) -> DVector<f64> {
    DVector::from_fn(cols.len(), |k, _| ds.values()[(row, cols[k])])
}

fn check_dims(params: &MvnParams, ds: &Dataset) -> Result<()> {
    ds.ensure_numeric()?;
    if params.dim() != ds.n_cols() {
        return Err(Error::shape(format!(
            "parameters have dimension {}, data has {} columns",
            params.dim(),
            ds.n_cols()
        )));
    }
    Ok(())
}

/// Observed-data log-likelihood; rows with no observed cell contribute 0.
pub fn loglik_observed(params: &MvnParams, ds: &Dataset) -> Result<f64> {
    loglik_with_ridge(params, ds, EmConfig::default().ridge)
}

pub(crate) fn loglik_with_ridge(params: &MvnParams, ds: &Dataset, ridge: f64) -> Result<f64> {
    check_dims(params, ds)?;
    let mut total = 0.0;
    for pat in patterns(ds) {
        if pat.obs.is_empty() {
            log::warn!("{} fully missing row(s) skipped in the likelihood", pat.rows.len());
            continue;
        }
        let s_oo = submatrix(&params.sigma, &pat.obs, &pat.obs);
        let (chol, ridged) = cholesky_ridge(&s_oo, ridge)?;
        if ridged {
            log::warn!("ridge added to a pattern covariance block");
        }
        let mu_o = subvector(&params.mu, &pat.obs);
        let constant = pat.obs.len() as f64 * LN_2PI + log_det(&chol);
        for &i in &pat.rows {
            let r = row_block(ds, i, &pat.obs) - &mu_o;
            let z = chol.solve(&r);
            total += -0.5 * (constant + r.dot(&z));
        }
    }
    if !total.is_finite() {
        return Err(Error::numerical("log-likelihood is not finite"));
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: MvnParams,
    pub iterations: usize,
    pub loglik: f64,
    /// Log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub fn em_fit(ds: &Dataset, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    ds.ensure_numeric()?;
    if ds.n_cols() == 0 {
        return Err(Error::invalid("EM needs at least one column"));
    }
    for j in 0..ds.n_cols() {
        if ds.observed_column(j).len() < 2 {
            return Err(Error::invalid(format!(
                "column '{}' needs at least 2 observed cells",
                ds.specs()[j].name
            )));
        }
    }
    let stats = pairwise_stats(ds)?;
    let mut warnings = stats.warnings;
    let mut sigma = stats.cov;
    if cholesky_ridge(&sigma, cfg.ridge).is_err() {
        warnings.push("pairwise covariance is indefinite; EM starts from its diagonal".into());
        sigma = DMatrix::from_diagonal(&sigma.diagonal());
    }
    let init = MvnParams::new(stats.mean, sigma)?;
    let mut fit = em_fit_from(ds, init, cfg)?;
    warnings.append(&mut fit.warnings);
    fit.warnings = warnings;
    Ok(fit)
}

/// EM from explicit starting parameters.
pub fn em_fit_from(ds: &Dataset, init: MvnParams, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    check_dims(&init, ds)?;
    let pats = patterns(ds);
    let mut warnings = Vec::new();
    let mut params = init;
    let mut ll_prev = loglik_with_ridge(&params, ds, cfg.ridge)?;
    let mut trace = vec![ll_prev];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter {
        iterations = it;
        let next = em_step(ds, &pats, &params, cfg, &mut warnings)?;
        let step = next.max_abs_diff(&params);
        params = next;
        let ll = loglik_with_ridge(&params, ds, cfg.ridge)?;
        if ll < ll_prev - MONOTONE_SLACK * ll_prev.abs().max(1.0) {
            return Err(Error::numerical(format!(
                "EM log-likelihood decreased at iteration {it}: {ll_prev} -> {ll}"
            )));
        }
        trace.push(ll);
        let rel = (ll - ll_prev).abs() / ll_prev.abs().max(f64::MIN_POSITIVE);
        ll_prev = ll;
        if rel < cfg.tol && step <= cfg.param_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("EM stopped at max_iter = {}", cfg.max_iter));
    }
    Ok(EmFit {
        params,
        iterations,
        loglik: ll_prev,
        trace,
        converged,
        warnings,
    })
}

fn em_step(
    ds: &Dataset,
    pats: &[Pattern],
    params: &MvnParams,
    cfg: &EmConfig,
    warnings: &mut Vec<String>,
) -> Result<MvnParams> {
    let d = params.dim();
    // accumulate deviations from the current mean for conditioning
    let mut s = DVector::<f64>::zeros(d);
    let mut t = DMatrix::<f64>::zeros(d, d);
    let mut count = 0usize;
    for pat in pats {
        if pat.obs.is_empty() {
            continue;
        }
        let cond = Conditional::new(params, pat, cfg.ridge)?;
        let mut y = DVector::<f64>::zeros(d);
        for &i in &pat.rows {
            for &j in &pat.obs {
                y[j] = ds.values()[(i, j)] - params.mu[j];
            }
            if !pat.mis.is_empty() {
                let yo = subvector(&y, &pat.obs);
                let ym = &cond.coef * yo;
                for (k, &j) in pat.mis.iter().enumerate() {
                    y[j] = ym[k];
                }
            }
            s += &y;
            t.ger(1.0, &y, &y, 1.0);
        }
        if let Some(c) = &cond.cov {
            let m = pat.rows.len() as f64;
            for (a, &ja) in pat.mis.iter().enumerate() {
                for (b, &jb) in pat.mis.iter().enumerate() {
                    t[(ja, jb)] += m * c[(a, b)];
                }
            }
        }
        count += pat.rows.len();
    }
    let n = count as f64;
    let shift = s / n;
    let mu = &params.mu + &shift;
    let mut sigma = t / n - &shift * shift.transpose();
    symmetrize(&mut sigma);
    if nalgebra::Cholesky::new(sigma.clone()).is_none() {
        warnings.push(format!("covariance not positive definite; ridge {} added", cfg.ridge));
        for j in 0..d {
            sigma[(j, j)] += cfg.ridge;
        }
    }
    MvnParams::new(mu, sigma)
}

/// Regression of the missing block on the observed block for one pattern.
struct Conditional {
    /// `Sigma_MO Sigma_OO^{-1}` (|M| × |O|); empty when nothing is missing.
    coef: DMatrix<f64>,
    /// `Sigma_MM - Sigma_MO Sigma_OO^{-1} Sigma_OM`, when something is missing.
    cov: Option<DMatrix<f64>>,
}

impl Conditional {
    fn new(params: &MvnParams, pat: &Pattern, ridge: f64) -> Result<Self> {
        if pat.mis.is_empty() {
            return Ok(Conditional {
                coef: DMatrix::zeros(0, pat.obs.len()),
                cov: None,
            });
        }
        let s_mm = submatrix(&params.sigma, &pat.mis, &pat.mis);
        if pat.obs.is_empty() {
            return Ok(Conditional {
                coef: DMatrix::zeros(pat.mis.len(), 0),
                cov: Some(s_mm),
            });
        }
        let s_oo = submatrix(&params.sigma, &pat.obs, &pat.obs);
        let s_om = submatrix(&params.sigma, &pat.obs, &pat.mis);
        let (chol, _) = cholesky_ridge(&s_oo, ridge)?;
        let solved = chol.solve(&s_om); // Sigma_OO^{-1} Sigma_OM
        let coef = solved.transpose();
        let mut cov = s_mm - s_om.transpose() * &solved;
        symmetrize(&mut cov);
        Ok(Conditional { coef, cov: Some(cov) })
    }
}

/// Fills every missing block with `mu_M + Sigma_MO Sigma_OO^{-1} (x_O - mu_O)`;
/// fully missing rows take `mu`.
pub fn conditional_impute(params: &MvnParams, ds: &Dataset) -> Result<Imputation> {
    conditional_impute_ridge(params, ds, EmConfig::default().ridge)
}

/// As [`conditional_impute`] with an explicit ridge on `Sigma_OO`.
pub fn conditional_impute_ridge(params: &MvnParams, ds: &Dataset, ridge: f64) -> Result<Imputation> {
    check_dims(params, ds)?;
    let mut fill = DMatrix::<f64>::zeros(ds.n_rows(), ds.n_cols());
    for pat in patterns(ds) {
        if pat.mis.is_empty() {
            continue;
        }
        let cond = Conditional::new(params, &pat, ridge)?;
        let mu_o = subvector(&params.mu, &pat.obs);
        for &i in &pat.rows {
            let ym = if pat.obs.is_empty() {
                DVector::zeros(pat.mis.len())
            } else {
                &cond.coef * (row_block(ds, i, &pat.obs) - &mu_o)
            };
            for (k, &j) in pat.mis.iter().enumerate() {
                fill[(i, j)] = params.mu[j] + ym[k];
            }
        }
    }
    ds.fill(&fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn bivariate() -> MvnParams {
        MvnParams::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn univariate_density_at_mean() {
        let p = MvnParams::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1)).unwrap();
        let ds = Dataset::from_rows(&[vec![Some(0.0)]], Dataset::generic_specs(1)).unwrap();
        let ll = loglik_observed(&p, &ds).unwrap();
        assert!((ll - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((ll + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn complete_data_matches_direct_formula() {
        let p = bivariate();
        let rows = [[0.3, -0.2], [1.1, 0.9], [-0.7, -1.4]];
        let ds = Dataset::from_rows(
            &rows.iter().map(|r| vec![Some(r[0]), Some(r[1])]).collect::<Vec<_>>(),
            Dataset::generic_specs(2),
        )
        .unwrap();
        // direct bivariate normal density
        let rho: f64 = 0.8;
        let direct: f64 = rows
            .iter()
            .map(|r| {
                let q = (r[0] * r[0] - 2.0 * rho * r[0] * r[1] + r[1] * r[1]) / (1.0 - rho * rho);
                -(2.0 * std::f64::consts::PI).ln() - 0.5 * (1.0 - rho * rho).ln() - 0.5 * q
            })
            .sum();
        assert!((loglik_observed(&p, &ds).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn fully_missing_row_contributes_nothing() {
        let p = bivariate();
        let a = Dataset::from_rows(&[vec![Some(0.5), Some(0.1)]], Dataset::generic_specs(2)).unwrap();
        let b = Dataset::from_rows(
            &[vec![Some(0.5), Some(0.1)], vec![None, None]],
            Dataset::generic_specs(2),
        )
        .unwrap();
        assert_eq!(loglik_observed(&p, &a).unwrap(), loglik_observed(&p, &b).unwrap());
    }

    #[test]
    fn conditional_mean_closed_form() {
        let ds = Dataset::from_rows(&[vec![Some(1.0), None], vec![Some(0.2), Some(0.3)]], Dataset::generic_specs(2))
            .unwrap();
        let imp = conditional_impute(&bivariate(), &ds).unwrap();
        assert!((imp.data.get(0, 1).unwrap() - 0.8).abs() < 1e-12);
        // observed row untouched
        assert_eq!(imp.data.get(1, 0).unwrap().to_bits(), 0.2f64.to_bits());
        assert_eq!(imp.data.get(1, 1).unwrap().to_bits(), 0.3f64.to_bits());
        assert_eq!(imp.provenance.as_slice(), &[false, false, true, false]);
    }

    #[test]
    fn diagonal_sigma_imputes_means() {
        let p = MvnParams::new(
            DVector::from_vec(vec![1.0, -2.0, 3.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
        )
        .unwrap();
        let ds = Dataset::from_rows(
            &[vec![Some(5.0), None, None], vec![None, None, None]],
            Dataset::generic_specs(3),
        )
        .unwrap();
        let imp = conditional_impute(&p, &ds).unwrap();
        assert_eq!(imp.data.get(0, 1), Some(-2.0));
        assert_eq!(imp.data.get(0, 2), Some(3.0));
        assert_eq!(imp.data.get(1, 0), Some(1.0));
    }

    #[test]
    fn complete_data_em_is_mle_in_one_iteration() {
        let ds = Dataset::complete(
            DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 2.0, 1.0, 0.5, 3.0, 4.0]),
            Dataset::generic_specs(2),
        )
        .unwrap();
        let fit = em_fit(&ds, &EmConfig::default()).unwrap();
        assert_eq!(fit.iterations, 1);
        assert!(fit.converged);
        let st = pairwise_stats(&ds).unwrap();
        assert!((fit.params.mu.clone() - st.mean).amax() < 1e-12);
        assert!((fit.params.sigma.clone() - st.cov).amax() < 1e-12);
    }

    #[test]
    fn never_jointly_observed_pair_keeps_initial_covariance() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let v = (i as f64 * 0.37).sin();
            if i % 2 == 0 {
                rows.push(vec![Some(v), None]);
            } else {
                rows.push(vec![None, Some(v * 2.0)]);
            }
        }
        let ds = Dataset::from_rows(&rows, Dataset::generic_specs(2)).unwrap();
        let fit = em_fit(&ds, &EmConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.params.sigma[(0, 1)].abs() < 1e-12);
        assert!(fit.warnings.iter().any(|w| w.contains("share fewer than 2 rows")));
    }

    #[test]
    fn em_requires_two_observed_per_column() {
        let ds = Dataset::from_rows(&[vec![Some(1.0), None], vec![Some(2.0), Some(1.0)]], Dataset::generic_specs(2))
            .unwrap();
        assert!(em_fit(&ds, &EmConfig::default()).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = EmConfig {
            max_iter: 0,
            ..EmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
