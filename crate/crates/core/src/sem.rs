//! Observed-variable path models.
//!
//! A model is a set of regression equations `Y ~ X1 + X2 + ...`. Every
//! variable that never appears on the left is exogenous; exogenous variables
//! carry a free covariance block `phi`, endogenous ones a residual variance
//! `psi`. With `A = (I - B)^{-1}` the model-implied moments are
//!
//! ```text
//! mu    = A * c                 (c: intercepts, exogenous means)
//! Sigma = A * Omega * A^T       (Omega: phi on the exogenous block,
//!                                diag(psi) on the endogenous diagonal)
//! ```
//!
//! Coefficients are estimated in two stages: EM gives the saturated moments,
//! then each equation is solved as a regression on those moments.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fiml::{em_fit, loglik_with_ridge, EmConfig, MvnParams};
use crate::linalg::{submatrix, symmetrize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equation {
    pub outcome: String,
    pub predictors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SemSpec {
    pub equations: Vec<Equation>,
    /// Every name mentioned, in order of first appearance.
    pub variables: Vec<String>,
}

impl SemSpec {
    pub fn from_equations(equations: Vec<Equation>) -> Result<Self> {
        let mut spec = SemSpec::default();
        for (k, eq) in equations.into_iter().enumerate() {
            spec.push(eq, k + 1)?;
        }
        Ok(spec)
    }

    fn push(&mut self, eq: Equation, line: usize) -> Result<()> {
        if eq.predictors.iter().any(|p| *p == eq.outcome) {
            return Err(Error::Spec {
                line,
                message: format!("self-loop: '{}' predicts itself", eq.outcome),
            });
        }
        if self.equations.iter().any(|e| e.outcome == eq.outcome) {
            return Err(Error::Spec {
                line,
                message: format!("duplicate outcome '{}'", eq.outcome),
            });
        }
        let unique: BTreeSet<&String> = eq.predictors.iter().collect();
        if unique.len() != eq.predictors.len() {
            return Err(Error::Spec {
                line,
                message: format!("repeated predictor in the equation for '{}'", eq.outcome),
            });
        }
        for name in std::iter::once(&eq.outcome).chain(eq.predictors.iter()) {
            if !self.variables.contains(name) {
                self.variables.push(name.clone());
            }
        }
        self.equations.push(eq);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.equations.is_empty()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = &str> {
        self.equations.iter().map(|e| e.outcome.as_str())
    }

    /// Renders one `Y ~ X1 + X2` line per equation.
    pub fn to_text(&self) -> String {
        self.equations
            .iter()
            .map(|e| format!("{} ~ {}\n", e.outcome, e.predictors.join(" + ")))
            .collect()
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

/// Parses `Y ~ X1 + X2 + ...` lines; `#` starts a comment.
pub fn parse_spec(text: &str) -> Result<SemSpec> {
    let mut spec = SemSpec::default();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |message: &str| Error::Spec {
            line: line_no,
            message: message.to_string(),
        };
        let (lhs, rhs) = line.split_once('~').ok_or_else(|| syntax("expected 'Y ~ X1 + X2'"))?;
        if rhs.starts_with('~') {
            return Err(syntax("'~~' (co)variance terms are not supported"));
        }
        let outcome = lhs.trim();
        if !is_name(outcome) {
            return Err(syntax("missing or invalid outcome name"));
        }
        let predictors: Vec<String> = rhs.split('+').map(|p| p.trim().to_string()).collect();
        if predictors.iter().any(|p| !is_name(p)) {
            return Err(syntax("invalid predictor list"));
        }
        spec.push(
            Equation {
                outcome: outcome.to_string(),
                predictors,
            },
            line_no,
        )?;
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    pub names: Vec<String>,
    /// `b[(i, j)]`: coefficient of variable `j` in the equation for `i`.
    pub b: DMatrix<f64>,
    /// Residual variance per variable; used on endogenous rows only.
    pub psi: DVector<f64>,
    /// Covariance over the exogenous variables, ordered as `exogenous`.
    pub phi: DMatrix<f64>,
    /// Equation intercepts for endogenous rows, means for exogenous rows.
    pub intercepts: DVector<f64>,
    pub endogenous: Vec<bool>,
}

impl PathModel {
    pub fn exogenous(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&j| !self.endogenous[j]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.names.len();
        if self.b.shape() != (d, d) || self.psi.len() != d || self.intercepts.len() != d || self.endogenous.len() != d {
            return Err(Error::Model("path model components have inconsistent sizes".into()));
        }
        let exo = self.exogenous();
        if self.phi.shape() != (exo.len(), exo.len()) {
            return Err(Error::Model("phi does not match the exogenous variable count".into()));
        }
        for i in 0..d {
            if self.b[(i, i)] != 0.0 {
                return Err(Error::Model(format!("'{}' has a self-loop", self.names[i])));
            }
            if self.endogenous[i] && !(self.psi[i] > 0.0) {
                return Err(Error::Model(format!("residual variance of '{}' must be positive", self.names[i])));
            }
            if !self.endogenous[i] && (0..d).any(|j| self.b[(i, j)] != 0.0) {
                return Err(Error::Model(format!("exogenous '{}' has incoming paths", self.names[i])));
            }
        }
        Ok(())
    }

    fn free_parameters(&self, paths: usize) -> usize {
        let d = self.names.len();
        let e = self.exogenous().len();
        let n_endo = self.endogenous.iter().filter(|&&x| x).count();
        d + e * (e + 1) / 2 + paths + n_endo
    }
}

/// Model-implied mean and covariance.
pub fn implied_moments(pm: &PathModel) -> Result<MvnParams> {
    pm.validate()?;
    let d = pm.names.len();
    let i_minus_b = DMatrix::<f64>::identity(d, d) - &pm.b;
    let a = i_minus_b
        .try_inverse()
        .ok_or_else(|| Error::Model("(I - B) is singular".into()))?;
    let mut omega = DMatrix::<f64>::zeros(d, d);
    let exo = pm.exogenous();
    for (p, &i) in exo.iter().enumerate() {
        for (q, &j) in exo.iter().enumerate() {
            omega[(i, j)] = pm.phi[(p, q)];
        }
    }
    for i in 0..d {
        if pm.endogenous[i] {
            omega[(i, i)] = pm.psi[i];
        }
    }
    let mut sigma = &a * omega * a.transpose();
    symmetrize(&mut sigma);
    let mu = &a * &pm.intercepts;
    MvnParams::new(mu, sigma)
}

#[derive(Debug, Clone)]
pub struct SemFit {
    pub model: PathModel,
    /// Model-implied moments.
    pub implied: MvnParams,
    /// Saturated EM moments.
    pub saturated: MvnParams,
    pub loglik: f64,
    pub loglik_saturated: f64,
    pub em_iterations: usize,
    pub df: usize,
    pub warnings: Vec<String>,
}

/// Estimates path coefficients by regression on FIML saturated moments.
pub fn fit_paths_fiml(spec: &SemSpec, ds: &Dataset, cfg: &EmConfig) -> Result<SemFit> {
    let names = ds.names();
    let d = names.len();
    if d < 2 {
        return Err(Error::invalid("path models need at least two variables"));
    }
    let index = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("sem variable '{name}' is not in the dataset")))
    };
    for v in &spec.variables {
        index(v)?;
    }
    let em = em_fit(ds, cfg)?;
    let mut warnings = em.warnings.clone();
    let sat = &em.params;

    let mut b = DMatrix::<f64>::zeros(d, d);
    let mut psi = DVector::<f64>::from_element(d, 1.0);
    let mut endogenous = vec![false; d];
    for eq in &spec.equations {
        let o = index(&eq.outcome)?;
        let preds: Vec<usize> = eq.predictors.iter().map(|p| index(p)).collect::<Result<_>>()?;
        endogenous[o] = true;
        let s_pp = submatrix(&sat.sigma, &preds, &preds);
        let s_po = submatrix(&sat.sigma, &preds, &[o]);
        let coef = match s_pp.clone().cholesky() {
            Some(c) => c.solve(&s_po),
            None => {
                warnings.push(format!("predictor block for '{}' is singular; ridge-stabilized", eq.outcome));
                let mut r = s_pp;
                for k in 0..r.nrows() {
                    r[(k, k)] += cfg.ridge.max(1e-10);
                }
                r.cholesky()
                    .ok_or_else(|| Error::Model(format!("predictor block for '{}' is not solvable", eq.outcome)))?
                    .solve(&s_po)
            }
        };
        for (k, &p) in preds.iter().enumerate() {
            b[(o, p)] = coef[(k, 0)];
        }
        let explained = (s_po.transpose() * &coef)[(0, 0)];
        let resid = sat.sigma[(o, o)] - explained;
        if resid <= 0.0 {
            warnings.push(format!("residual variance of '{}' clipped to ridge", eq.outcome));
        }
        psi[o] = resid.max(cfg.ridge.max(1e-12));
    }
    let exo: Vec<usize> = (0..d).filter(|&j| !endogenous[j]).collect();
    let phi = submatrix(&sat.sigma, &exo, &exo);
    let intercepts = DVector::from_fn(d, |i, _| {
        if endogenous[i] {
            sat.mu[i] - (0..d).map(|j| b[(i, j)] * sat.mu[j]).sum::<f64>()
        } else {
            sat.mu[i]
        }
    });
    let model = PathModel {
        names,
        b,
        psi,
        phi,
        intercepts,
        endogenous,
    };
    let implied = implied_moments(&model)?;
    let loglik = loglik_with_ridge(&implied, ds, cfg.ridge)?;
    let saturated_params = d * (d + 3) / 2;
    let paths: usize = spec.equations.iter().map(|e| e.predictors.len()).sum();
    let df = saturated_params.saturating_sub(model.free_parameters(paths));
    Ok(SemFit {
        model,
        implied,
        saturated: em.params.clone(),
        loglik,
        loglik_saturated: em.loglik,
        em_iterations: em.iterations,
        df,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitIndices {
    pub chi2: f64,
    pub df: usize,
    pub cfi: f64,
    pub rmsea: f64,
}

/// CFI and RMSEA from model, saturated and baseline log-likelihoods.
///
/// CFI is reported without clamping to 1, so a model whose chi-square falls
/// below its degrees of freedom scores above 1.
pub fn fit_indices(
    loglik_model: f64,
    loglik_saturated: f64,
    loglik_baseline: f64,
    df_model: usize,
    df_baseline: usize,
    n: usize,
) -> Result<FitIndices> {
    if n == 0 {
        return Err(Error::invalid("fit indices need n > 0"));
    }
    let chi2_m = (2.0 * (loglik_saturated - loglik_model)).max(0.0);
    let chi2_b = (2.0 * (loglik_saturated - loglik_baseline)).max(0.0);
    if df_model == 0 {
        return Ok(FitIndices {
            chi2: chi2_m,
            df: 0,
            cfi: 1.0,
            rmsea: 0.0,
        });
    }
    let excess_m = chi2_m - df_model as f64;
    let excess_b = chi2_b - df_baseline as f64;
    let denom = excess_b.max(excess_m).max(0.0);
    let cfi = if denom > 0.0 { 1.0 - excess_m / denom } else { 1.0 };
    let rmsea = (excess_m.max(0.0) / (df_model as f64 * n as f64)).sqrt();
    Ok(FitIndices {
        chi2: chi2_m,
        df: df_model,
        cfi,
        rmsea,
    })
}

/// Independence model: per-variable ML mean and variance, which maximize the
/// observed-data likelihood of a diagonal-covariance normal.
pub fn independence_loglik(ds: &Dataset, cfg: &EmConfig) -> Result<f64> {
    let d = ds.n_cols();
    let mut mu = DVector::zeros(d);
    let mut var = DVector::zeros(d);
    for j in 0..d {
        let obs = ds.observed_column(j);
        if obs.is_empty() {
            return Err(Error::invalid(format!("column '{}' has no observed cells", ds.specs()[j].name)));
        }
        let m = obs.iter().sum::<f64>() / obs.len() as f64;
        mu[j] = m;
        var[j] = (obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64).max(cfg.ridge.max(1e-12));
    }
    loglik_with_ridge(&MvnParams::new(mu, DMatrix::from_diagonal(&var))?, ds, cfg.ridge)
}

/// Fit indices of a fitted path model against the saturated and
/// independence models on the same data.
pub fn assess_fit(fit: &SemFit, ds: &Dataset, cfg: &EmConfig) -> Result<FitIndices> {
    let d = ds.n_cols();
    let base = independence_loglik(ds, cfg)?;
    fit_indices(fit.loglik, fit.loglik_saturated, base, fit.df, d * (d - 1) / 2, ds.n_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_multi_predictor_equation() {
        let s = parse_spec("# BMI model\nBMI ~ GeneralHealth + AgeCategory + SleepHours + HadDiabetes + SmokerStatus\n")
            .unwrap();
        assert_eq!(s.equations.len(), 1);
        assert_eq!(s.equations[0].predictors.len(), 5);
        assert_eq!(s.variables.len(), 6);
        assert_eq!(parse_spec(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn self_loop_and_duplicates_rejected() {
        assert!(matches!(parse_spec("Y ~ Y"), Err(Error::Spec { line: 1, .. })));
        assert!(matches!(parse_spec("Y ~ X\n\nY ~ Z"), Err(Error::Spec { line: 3, .. })));
        assert!(matches!(parse_spec("Y X"), Err(Error::Spec { line: 1, .. })));
        assert!(matches!(parse_spec("Y ~ "), Err(Error::Spec { .. })));
        assert!(matches!(parse_spec("Y ~~ Y"), Err(Error::Spec { .. })));
    }

    #[test]
    fn empty_spec() {
        let s = parse_spec("\n# nothing\n").unwrap();
        assert!(s.is_empty());
        assert!(s.variables.is_empty());
    }

    fn model(b: DMatrix<f64>, psi: Vec<f64>, phi: DMatrix<f64>, endo: Vec<bool>) -> PathModel {
        let d = endo.len();
        PathModel {
            names: (0..d).map(|i| format!("v{i}")).collect(),
            b,
            psi: DVector::from_vec(psi),
            phi,
            intercepts: DVector::zeros(d),
            endogenous: endo,
        }
    }

    #[test]
    fn no_paths_gives_identity() {
        let pm = model(DMatrix::zeros(3, 3), vec![1.0; 3], DMatrix::zeros(0, 0), vec![true; 3]);
        let m = implied_moments(&pm).unwrap();
        assert_eq!(m.sigma, DMatrix::identity(3, 3));
    }

    #[test]
    fn single_path_tracing() {
        // y = 0.5 x + e, Var(x) = 1, psi_y = 1
        let mut b = DMatrix::zeros(2, 2);
        b[(1, 0)] = 0.5;
        let pm = model(b, vec![1.0, 1.0], DMatrix::identity(1, 1), vec![false, true]);
        let m = implied_moments(&pm).unwrap();
        assert!((m.sigma[(1, 1)] - 1.25).abs() < 1e-15);
        assert!((m.sigma[(0, 1)] - 0.5).abs() < 1e-15);
        assert!((m.sigma[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_i_minus_b_rejected() {
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let pm = model(b, vec![1.0, 1.0], DMatrix::zeros(0, 0), vec![true, true]);
        assert!(matches!(implied_moments(&pm), Err(Error::Model(_))));
    }

    #[test]
    fn fit_index_cases() {
        let sat = fit_indices(-100.0, -100.0, -300.0, 0, 10, 50).unwrap();
        assert_eq!((sat.cfi, sat.rmsea), (1.0, 0.0));
        // chi2_m = df_m
        let edge = fit_indices(-105.0, -100.0, -300.0, 10, 15, 50).unwrap();
        assert_eq!(edge.rmsea, 0.0);
        // chi2_m = 5, df_m = 10, chi2_b = 200, df_b = 15, n = 1000
        let over = fit_indices(-102.5, -100.0, -200.0, 10, 15, 1000).unwrap();
        assert!((over.cfi - (1.0 + 5.0 / 185.0)).abs() < 1e-12);
        assert!(over.cfi > 1.0);
        assert_eq!(over.rmsea, 0.0);
        assert!(fit_indices(0.0, 0.0, 0.0, 1, 1, 0).is_err());
    }
}
