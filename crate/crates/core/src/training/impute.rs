use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{train, EpochRecord, LossWeights, TrainConfig, TrainData, TrainMode};
use crate::attention::refine;
use crate::dataset::{apply_scales, encode_ordinal, normalize, snap_ordinal, ColumnScale, Dataset, Imputation};
use crate::error::{Error, Result, StageExt};
use crate::fiml::{conditional_impute_ridge, em_fit, EmConfig, MvnParams};
use crate::sem::{assess_fit, fit_paths_fiml, FitIndices, SemSpec};

/// Which moments seed the conditional-mean initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Moments implied by the supplied path model (saturated when no model
    /// is given).
    SemImplied,
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    pub em: EmConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub moments: MomentSource,
    /// Run attention on per-column standardized data (see crate docs).
    pub standardize_attention: bool,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            em: EmConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            moments: MomentSource::SemImplied,
            standardize_attention: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SemSummary {
    /// `(outcome, predictor, estimate)` on the normalized scale.
    pub coefficients: Vec<(String, String, f64)>,
    /// `(outcome, residual variance)` on the normalized scale.
    pub residual_variances: Vec<(String, f64)>,
    pub loglik: f64,
    pub fit: FitIndices,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputeReport {
    pub imputed_cells: usize,
    pub em_iterations: usize,
    pub em_loglik: Option<f64>,
    pub em_converged: bool,
    pub moments: MomentSource,
    pub mode: TrainMode,
    pub sem: Option<SemSummary>,
    pub epochs: usize,
    pub converged: bool,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
    /// `true` where the output value was imputed.
    #[serde(skip)]
    pub provenance: DMatrix<bool>,
}

impl ImputeReport {
    fn unchanged(ds: &Dataset, cfg: &ImputeConfig) -> Self {
        ImputeReport {
            imputed_cells: 0,
            em_iterations: 0,
            em_loglik: None,
            em_converged: true,
            moments: cfg.moments,
            mode: cfg.train.mode,
            sem: None,
            epochs: 0,
            converged: true,
            history: Vec::new(),
            warnings: Vec::new(),
            provenance: DMatrix::from_element(ds.n_rows(), ds.n_cols(), false),
        }
    }
}

/// Imputes every missing cell: ordinal encoding, min-max normalization,
/// FIML conditional means, self-supervised attention training, a final
/// refinement pass, then back to data units with ordinal cells snapped to
/// valid levels. Observed cells are returned bit-identical.
pub fn impute(ds: &Dataset, spec: Option<&SemSpec>, cfg: &ImputeConfig) -> Result<(Dataset, ImputeReport)> {
    let mut cfg = cfg.clone();
    cfg.train.mode = TrainMode::SelfSupervised;
    run(ds, spec, None, &cfg)
}

/// As [`impute`], but when `truth` is given and the configured mode is
/// benchmark, the masked ground truth supervises training.
pub fn impute_with_truth(
    ds: &Dataset,
    spec: Option<&SemSpec>,
    truth: Option<&Dataset>,
    cfg: &ImputeConfig,
) -> Result<(Dataset, ImputeReport)> {
    run(ds, spec, truth, cfg)
}

fn run(ds: &Dataset, spec: Option<&SemSpec>, truth: Option<&Dataset>, cfg: &ImputeConfig) -> Result<(Dataset, ImputeReport)> {
    let encoded = encode_ordinal(ds).stage("encode")?;
    if encoded.is_complete() {
        return Ok((encoded.clone(), ImputeReport::unchanged(&encoded, cfg)));
    }
    let normalized = normalize(&encoded).stage("normalize")?;
    let scales = normalized.normalization().expect("just normalized").to_vec();

    let mut warnings = Vec::new();
    let use_sem = cfg.moments == MomentSource::SemImplied && spec.is_some_and(|s| !s.is_empty());
    let (moments, em_iterations, em_loglik, em_converged, sem): (MvnParams, usize, f64, bool, Option<SemSummary>) =
        if use_sem {
            let spec = spec.expect("checked");
            let fit = fit_paths_fiml(spec, &normalized, &cfg.em).stage("sem")?;
            let indices = assess_fit(&fit, &normalized, &cfg.em).stage("sem")?;
            warnings.extend(fit.warnings.iter().cloned());
            let names = &fit.model.names;
            let mut coefficients = Vec::new();
            let mut residual_variances = Vec::new();
            for i in 0..names.len() {
                if !fit.model.endogenous[i] {
                    continue;
                }
                for j in 0..names.len() {
                    if fit.model.b[(i, j)] != 0.0 {
                        coefficients.push((names[i].clone(), names[j].clone(), fit.model.b[(i, j)]));
                    }
                }
                residual_variances.push((names[i].clone(), fit.model.psi[i]));
            }
            let summary = SemSummary {
                coefficients,
                residual_variances,
                loglik: fit.loglik,
                fit: indices,
            };
            (fit.implied, fit.em_iterations, fit.loglik_saturated, true, Some(summary))
        } else {
            let fit = em_fit(&normalized, &cfg.em).stage("fiml")?;
            warnings.extend(fit.warnings.iter().cloned());
            (fit.params, fit.iterations, fit.loglik, fit.converged, None)
        };
    let init = conditional_impute_ridge(&moments, &normalized, cfg.em.ridge).stage("fiml")?;

    // Attention space: the min-max data re-centred and re-scaled per column
    // by the mean and standard deviation of the FIML-filled matrix.
    let z = attention_space(init.data.values(), &scales, cfg.standardize_attention);
    let observed_z = apply_scales(&encoded, &z.composite);
    let init_z = Imputation {
        data: Dataset::complete(z.forward(init.data.values()), encoded.specs().to_vec()).stage("train")?,
        provenance: init.provenance.clone(),
    };
    let moments_z = z.moments(&moments).stage("train")?;

    let truth_z = match (cfg.train.mode, truth) {
        (TrainMode::Benchmark, Some(t)) => {
            let t = encode_ordinal(t).stage("encode")?;
            if t.values().shape() != encoded.values().shape() {
                return Err(Error::shape("ground truth shape differs from data")).stage("train");
            }
            Some(apply_scales(&t, &z.composite))
        }
        (TrainMode::Benchmark, None) => {
            return Err(Error::invalid("benchmark mode needs ground truth")).stage("train");
        }
        _ => None,
    };
    let data = TrainData {
        observed: &observed_z,
        init: &init_z,
        moments: &moments_z,
        truth: truth_z.as_ref(),
        ridge: cfg.em.ridge,
    };
    let outcome = train(&data, &cfg.train, &cfg.weights).stage("train")?;
    let refined = refine(&init_z.data, &outcome.params, &init_z.provenance).stage("refine")?;

    let mut values = refined.values().clone();
    for (j, mut col) in values.column_iter_mut().enumerate() {
        for v in col.iter_mut() {
            *v = z.composite[j].inverse(*v);
        }
    }
    for ((v, &m), &orig) in values.iter_mut().zip(encoded.mask().iter()).zip(encoded.values().iter()) {
        if m {
            *v = orig;
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("imputed value is not finite")).stage("output");
    }
    let out = snap_ordinal(&Dataset::complete(values, encoded.specs().to_vec()).stage("output")?);

    let report = ImputeReport {
        imputed_cells: init.imputed_count(),
        em_iterations,
        em_loglik: Some(em_loglik),
        em_converged,
        moments: cfg.moments,
        mode: cfg.train.mode,
        sem,
        epochs: outcome.history.len(),
        converged: outcome.converged,
        history: outcome.history,
        warnings,
        provenance: init.provenance,
    };
    Ok((out, report))
}

/// Per-column affine map from min-max space to attention space.
struct AttentionSpace {
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// Raw data units straight to attention space.
    composite: Vec<ColumnScale>,
}

fn attention_space(filled: &DMatrix<f64>, minmax: &[ColumnScale], standardize: bool) -> AttentionSpace {
    let (n, d) = filled.shape();
    let mut shift = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut composite = Vec::with_capacity(d);
    for j in 0..d {
        let span = minmax[j].hi - minmax[j].lo;
        if standardize && span > 0.0 {
            let col = filled.column(j);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            if sd > 1e-12 {
                shift[j] = m;
                scale[j] = sd;
            }
        }
        let lo = minmax[j].lo + shift[j] * span;
        composite.push(ColumnScale {
            lo,
            hi: lo + scale[j] * span,
        });
    }
    AttentionSpace { shift, scale, composite }
}

impl AttentionSpace {
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.shift[j]) / self.scale[j])
    }

    fn moments(&self, p: &MvnParams) -> Result<MvnParams> {
        let d = p.dim();
        let mu = DVector::from_fn(d, |j, _| (p.mu[j] - self.shift[j]) / self.scale[j]);
        let sigma = DMatrix::from_fn(d, d, |i, j| p.sigma[(i, j)] / (self.scale[i] * self.scale[j]));
        MvnParams::new(mu, sigma)
    }
}
