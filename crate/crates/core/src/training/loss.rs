//! Composite imputation loss and its analytic gradient.
//!
//! ```text
//! total = alpha * mse + beta * ||Cov(X_hat) - Cov_ref||_F + gamma * sum |theta|
//! ```
//!
//! `X_hat` takes the attention output on the free cells and the input value
//! everywhere else; the MSE runs over the evaluation cells only.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{forward_cached, AttentionParams, ForwardCache};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub cov: f64,
    pub l1: f64,
}

impl LossBreakdown {
    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        [("mse", self.mse), ("cov", self.cov), ("l1", self.l1), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_wq: DMatrix<f64>,
    pub d_wk: DMatrix<f64>,
    pub d_wv: DMatrix<f64>,
}

impl GradientSet {
    pub fn matrices(&self) -> [&DMatrix<f64>; 3] {
        [&self.d_wq, &self.d_wk, &self.d_wv]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in [("wq", &self.d_wq), ("wk", &self.d_wk), ("wv", &self.d_wv)] {
            if !crate::linalg::is_finite(m) {
                return Err(Error::numerical(format!("gradient for {name} is not finite")));
            }
        }
        Ok(())
    }

    pub(crate) fn flat(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.iter().copied()).collect()
    }
}

/// ML covariance (denominator `n`) of the columns of `x`.
pub fn ml_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    xc.tr_mul(&xc) / n
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    xc
}

fn terms(
    imputed: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    eval: &DMatrix<bool>,
    cov_ref: &DMatrix<f64>,
    params: &AttentionParams,
    w: &LossWeights,
) -> LossBreakdown {
    let mut sq = 0.0;
    let mut count = 0usize;
    for ((a, b), &e) in imputed.iter().zip(reference.iter()).zip(eval.iter()) {
        if e {
            sq += (a - b) * (a - b);
            count += 1;
        }
    }
    let mse = if count == 0 {
        log::warn!("no evaluation cells; MSE term is 0");
        0.0
    } else {
        sq / count as f64
    };
    let cov = (ml_covariance(imputed) - cov_ref).norm();
    let l1 = params.l1_norm();
    LossBreakdown {
        total: w.alpha * mse + w.beta * cov + w.gamma * l1,
        mse,
        cov,
        l1,
    }
}

/// Loss of a finished imputation against a reference matrix; the covariance
/// reference is the ML covariance of `reference` itself.
pub fn composite_loss(
    imputed: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    eval_mask: &DMatrix<bool>,
    params: &AttentionParams,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if imputed.shape() != reference.shape() || eval_mask.shape() != imputed.shape() {
        return Err(Error::shape("imputed, reference and eval mask must share a shape"));
    }
    Ok(terms(imputed, reference, eval_mask, &ml_covariance(reference), params, w))
}

/// Everything the loss depends on apart from the attention parameters.
#[derive(Debug, Clone)]
pub struct LossState {
    /// Filled matrix fed to attention.
    pub input: DMatrix<f64>,
    /// Cells whose value is the attention output.
    pub free: DMatrix<bool>,
    /// Target values; read on `eval` cells.
    pub reference: DMatrix<f64>,
    pub eval: DMatrix<bool>,
    pub cov_ref: DMatrix<f64>,
}

impl LossState {
    pub fn new(
        input: DMatrix<f64>,
        free: DMatrix<bool>,
        reference: DMatrix<f64>,
        eval: DMatrix<bool>,
        cov_ref: DMatrix<f64>,
    ) -> Result<Self> {
        let s = input.shape();
        if free.shape() != s || reference.shape() != s || eval.shape() != s || cov_ref.shape() != (s.1, s.1) {
            return Err(Error::shape("loss state components disagree in shape"));
        }
        if eval.iter().zip(free.iter()).any(|(&e, &f)| e && !f) {
            return Err(Error::invalid("evaluation cells must be free cells"));
        }
        Ok(LossState {
            input,
            free,
            reference,
            eval,
            cov_ref,
        })
    }

    pub(crate) fn assemble(&self, output: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.input.clone();
        for ((v, &o), &f) in x.iter_mut().zip(output.iter()).zip(self.free.iter()) {
            if f {
                *v = o;
            }
        }
        x
    }
}

pub fn loss_at(state: &LossState, params: &AttentionParams, w: &LossWeights) -> Result<LossBreakdown> {
    let cache = forward_cached(&state.input, params)?;
    let imputed = state.assemble(&cache.output);
    Ok(terms(&imputed, &state.reference, &state.eval, &state.cov_ref, params, w))
}

/// Loss and exact gradient with respect to `wq`, `wk`, `wv`.
pub fn grad_composite(
    state: &LossState,
    params: &AttentionParams,
    w: &LossWeights,
) -> Result<(LossBreakdown, GradientSet)> {
    let cache = forward_cached(&state.input, params)?;
    let imputed = state.assemble(&cache.output);
    let loss = terms(&imputed, &state.reference, &state.eval, &state.cov_ref, params, w);
    let grads = backward(state, params, w, &cache, &imputed, &loss);
    grads.check_finite()?;
    Ok((loss, grads))
}

fn backward(
    state: &LossState,
    params: &AttentionParams,
    w: &LossWeights,
    cache: &ForwardCache,
    imputed: &DMatrix<f64>,
    loss: &LossBreakdown,
) -> GradientSet {
    let (n, d) = imputed.shape();
    let mut g = DMatrix::<f64>::zeros(n, d);

    let n_eval = state.eval.iter().filter(|&&e| e).count();
    if n_eval > 0 && w.alpha != 0.0 {
        let c = 2.0 * w.alpha / n_eval as f64;
        for (((gv, &x), &t), &e) in g.iter_mut().zip(imputed.iter()).zip(state.reference.iter()).zip(state.eval.iter()) {
            if e {
                *gv += c * (x - t);
            }
        }
    }
    if w.beta != 0.0 && loss.cov > 0.0 {
        // d||D||_F / dX = (2 / (n ||D||_F)) Xc D, D symmetric
        let diff = ml_covariance(imputed) - &state.cov_ref;
        let xc = centered(imputed);
        g += xc * diff * (2.0 * w.beta / (n as f64 * loss.cov));
    }
    for (gv, &f) in g.iter_mut().zip(state.free.iter()) {
        if !f {
            *gv = 0.0;
        }
    }

    let at = &cache.at;
    let d_v = at * &g;
    let d_at = &cache.v * g.transpose();
    // softmax backward, one sample (column) at a time
    let mut d_st = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let a = at.column(i);
        let da = d_at.column(i);
        let inner = a.dot(&da);
        for j in 0..n {
            d_st[(j, i)] = a[j] * (da[j] - inner);
        }
    }
    let scale = 1.0 / (params.dk() as f64).sqrt();
    let d_q = d_st.tr_mul(&cache.k) * scale;
    let d_k = &d_st * &cache.q * scale;
    let x = &state.input;
    let mut d_wq = x.tr_mul(&d_q);
    let mut d_wk = x.tr_mul(&d_k);
    let mut d_wv = x.tr_mul(&d_v);
    if w.gamma != 0.0 {
        for (gm, pm) in [(&mut d_wq, &params.wq), (&mut d_wk, &params.wk), (&mut d_wv, &params.wv)] {
            for (gv, &p) in gm.iter_mut().zip(pm.iter()) {
                *gv += w.gamma * sign(p);
            }
        }
    }
    GradientSet { d_wq, d_wk, d_wv }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    Ok((f(x + h) - f(x - h)) / (2.0 * h))
}

/// Which matrix a parameter coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    Wq,
    Wk,
    Wv,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 3] = [ParamBlock::Wq, ParamBlock::Wk, ParamBlock::Wv];

    fn index(self) -> usize {
        match self {
            ParamBlock::Wq => 0,
            ParamBlock::Wk => 1,
            ParamBlock::Wv => 2,
        }
    }
}

/// Central difference of the total loss along one parameter coordinate
/// (`linear` indexes the matrix in column-major order).
pub fn finite_diff_coord(
    state: &LossState,
    params: &AttentionParams,
    w: &LossWeights,
    block: ParamBlock,
    linear: usize,
    h: f64,
) -> Result<f64> {
    let base = params.matrices()[block.index()][linear];
    let eval = |x: f64| {
        let mut p = params.clone();
        p.matrices_mut()[block.index()][linear] = x;
        loss_at(state, &p, w).map(|l| l.total).unwrap_or(f64::NAN)
    };
    central_difference(eval, base, h)
}

/// Central-difference gradient over every parameter.
pub fn finite_diff_grad(state: &LossState, params: &AttentionParams, w: &LossWeights, h: f64) -> Result<GradientSet> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut out = [params.wq.clone(), params.wk.clone(), params.wv.clone()];
    for block in ParamBlock::ALL {
        for linear in 0..out[block.index()].len() {
            out[block.index()][linear] = finite_diff_coord(state, params, w, block, linear, h)?;
        }
    }
    let [d_wq, d_wk, d_wv] = out;
    Ok(GradientSet { d_wq, d_wk, d_wv })
}
