//! Training of the attention refiner and the end-to-end imputation pipeline.
//!
//! Each epoch runs one forward pass from the FIML-filled matrix, evaluates
//! the composite loss, backpropagates, and takes one Adam step. In benchmark
//! mode the loss is supervised by the masked ground truth. In
//! self-supervised mode a fresh seeded subset of observed cells is hidden
//! every epoch, re-imputed from the fitted moments, and used as the target.

mod impute;
mod loss;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::dataset::{Dataset, Imputation};
use crate::error::{Error, Result};
use crate::fiml::{conditional_impute_ridge, MvnParams};
use crate::optim::AdamMoments;
use crate::rng;

pub use impute::{impute, impute_with_truth, ImputeConfig, ImputeReport, MomentSource, SemSummary};
pub use loss::{
    central_difference, composite_loss, finite_diff_coord, finite_diff_grad, grad_composite, loss_at, ml_covariance,
    GradientSet, LossBreakdown, LossState, LossWeights, ParamBlock,
};

/// Epoch distance over which the relative loss change is measured.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Ground truth of the masked cells supervises the MSE term.
    Benchmark,
    /// Observed cells are hidden at random and used as targets.
    SelfSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub rel_tol: f64,
    pub self_mask_rate: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Query/key width; defaults to the number of columns.
    #[serde(default)]
    pub dk: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 500,
            rel_tol: 1e-5,
            self_mask_rate: 0.1,
            seed: 0,
            mode: TrainMode::SelfSupervised,
            dk: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.max_epochs < 1 || !(self.rel_tol >= 0.0) {
            return Err(Error::invalid(format!("bad training config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.self_mask_rate) {
            return Err(Error::invalid("self_mask_rate must lie in [0, 1)"));
        }
        if self.dk == Some(0) {
            return Err(Error::invalid("dk must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AttentionParams,
    pub history: Vec<EpochRecord>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    moments: AdamMoments,
}

impl AdamState {
    pub fn new(params: &AttentionParams) -> Self {
        AdamState {
            moments: AdamMoments::new(params.n_params()),
        }
    }
}

/// One bias-corrected Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub fn adam_step(
    params: &AttentionParams,
    grads: &GradientSet,
    state: &AdamState,
    lr: f64,
    t: usize,
) -> Result<(AttentionParams, AdamState)> {
    if t < 1 {
        return Err(Error::invalid("Adam step counter starts at 1"));
    }
    let mut flat: Vec<f64> = params.matrices().iter().flat_map(|m| m.iter().copied()).collect();
    if flat.len() != state.moments.m.len() {
        return Err(Error::shape("Adam state does not match the parameters"));
    }
    let mut next = state.clone();
    next.moments.step(&mut flat, &grads.flat(), lr, t);
    let mut out = params.clone();
    let mut it = flat.into_iter();
    for m in out.matrices_mut() {
        for v in m.iter_mut() {
            *v = it.next().expect("length checked");
        }
    }
    Ok((out, next))
}

/// Inputs shared by every epoch.
pub struct TrainData<'a> {
    /// Normalized data with its original mask.
    pub observed: &'a Dataset,
    /// FIML-filled version of `observed`.
    pub init: &'a Imputation,
    /// Moments that produced `init`; re-used to fill self-masked cells.
    pub moments: &'a MvnParams,
    /// Ground truth on the same scale, benchmark mode only.
    pub truth: Option<&'a Dataset>,
    pub ridge: f64,
}

/// Exactly `round(rate * observed)` observed cells, chosen by a seeded
/// partial Fisher–Yates shuffle.
fn draw_self_mask(mask: &DMatrix<bool>, rate: f64, seed: u64) -> DMatrix<bool> {
    let mut cells: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect();
    let k = (rate * cells.len() as f64).round() as usize;
    let mut r = rng::seeded(seed);
    let total = cells.len();
    for pos in 0..k {
        let pick = r.random_range(pos..total);
        cells.swap(pos, pick);
    }
    let mut out = DMatrix::from_element(mask.nrows(), mask.ncols(), false);
    for &c in &cells[..k] {
        out[c] = true;
    }
    out
}

fn benchmark_state(data: &TrainData<'_>) -> Result<LossState> {
    let truth = data
        .truth
        .ok_or_else(|| Error::invalid("benchmark mode needs ground truth"))?;
    if !truth.is_complete() || truth.values().shape() != data.observed.values().shape() {
        return Err(Error::invalid("ground truth must be complete and shaped like the data"));
    }
    let free = data.init.provenance.clone();
    LossState::new(
        data.init.data.values().clone(),
        free.clone(),
        truth.values().clone(),
        free,
        ml_covariance(truth.values()),
    )
}

fn self_supervised_state(data: &TrainData<'_>, cfg: &TrainConfig, epoch: usize, cov_ref: &DMatrix<f64>) -> Result<LossState> {
    let mask = data.observed.mask();
    let hidden = draw_self_mask(mask, cfg.self_mask_rate, rng::derive_seed(cfg.seed, epoch as u64));
    let reduced = mask.zip_map(&hidden, |m, h| m && !h);
    let refill = conditional_impute_ridge(data.moments, &data.observed.with_mask(reduced)?, data.ridge)?;
    let free = data.init.provenance.zip_map(&hidden, |p, h| p || h);
    LossState::new(
        refill.data.values().clone(),
        free,
        data.init.data.values().clone(),
        hidden,
        cov_ref.clone(),
    )
}

/// Runs Adam on the composite loss until the relative change of the total
/// loss over [`CONVERGENCE_WINDOW`] epochs falls below `rel_tol`, or
/// `max_epochs` is reached.
pub fn train(data: &TrainData<'_>, cfg: &TrainConfig, w: &LossWeights) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.validate()?;
    let d = data.observed.n_cols();
    if data.init.data.values().shape() != data.observed.values().shape() {
        return Err(Error::shape("initial imputation does not match the data"));
    }
    let mut params = AttentionParams::init(d, cfg.dk.unwrap_or(d), cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.max_epochs);
    let mut converged = false;

    let fixed = match cfg.mode {
        TrainMode::Benchmark => Some(benchmark_state(data)?),
        TrainMode::SelfSupervised => None,
    };
    let cov_ref = match cfg.mode {
        TrainMode::Benchmark => DMatrix::zeros(0, 0),
        TrainMode::SelfSupervised => crate::dataset::pairwise_stats(data.observed)?.cov,
    };

    for epoch in 1..=cfg.max_epochs {
        let state_owned;
        let state = match &fixed {
            Some(s) => s,
            None => {
                state_owned = self_supervised_state(data, cfg, epoch, &cov_ref)?;
                &state_owned
            }
        };
        let (loss, grads) = grad_composite(state, &params, w).map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        if let Some(component) = loss.first_non_finite() {
            return Err(Error::numerical(format!("epoch {epoch}: {component} loss is not finite")));
        }
        history.push(EpochRecord { epoch, loss });
        let (p, a) = adam_step(&params, &grads, &adam, cfg.lr, epoch)?;
        params = p;
        adam = a;
        if epoch > CONVERGENCE_WINDOW {
            let then = history[epoch - 1 - CONVERGENCE_WINDOW].loss.total;
            let rel = (loss.total - then).abs() / then.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.rel_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_wrapper_first_step() {
        let p = AttentionParams::init(2, 2, 1).unwrap();
        let g = GradientSet {
            d_wq: DMatrix::from_element(2, 2, 3.0),
            d_wk: DMatrix::from_element(2, 2, -0.5),
            d_wv: DMatrix::zeros(2, 2),
        };
        let st = AdamState::new(&p);
        let (next, st2) = adam_step(&p, &g, &st, 1e-3, 1).unwrap();
        assert!(((&p.wq - &next.wq).add_scalar(-1e-3)).amax() < 1e-9);
        assert!(((&next.wk - &p.wk).add_scalar(-1e-3)).amax() < 1e-8);
        assert_eq!(next.wv, p.wv);
        let (again, st3) = adam_step(&p, &g, &st, 1e-3, 1).unwrap();
        assert_eq!(again, next);
        assert_eq!(st3, st2);
        assert!(adam_step(&p, &g, &st, 1e-3, 0).is_err());
    }

    #[test]
    fn self_mask_count_is_exact() {
        let mask = DMatrix::from_fn(10, 3, |i, j| (i + j) % 4 != 0);
        let observed = mask.iter().filter(|&&m| m).count();
        let h = draw_self_mask(&mask, 0.1, 3);
        assert_eq!(h.iter().filter(|&&b| b).count(), (0.1 * observed as f64).round() as usize);
        assert!(h.iter().zip(mask.iter()).all(|(&h, &m)| !h || m));
        assert_eq!(h, draw_self_mask(&mask, 0.1, 3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            self_mask_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
