//! Controlled MCAR masking of complete data.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub rate: f64,
    pub seed: u64,
    /// Column names eligible for masking; empty means all columns.
    #[serde(default)]
    pub scope: BTreeSet<String>,
}

impl MaskPlan {
    pub fn new(rate: f64, seed: u64) -> Self {
        MaskPlan {
            rate,
            seed,
            scope: BTreeSet::new(),
        }
    }

    pub fn with_scope<S: Into<String>>(mut self, cols: impl IntoIterator<Item = S>) -> Self {
        self.scope = cols.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone)]
pub struct Masked {
    pub masked: Dataset,
    pub truth: Dataset,
}

/// Hides exactly `round(rate * cells_in_scope)` cells chosen uniformly
/// without replacement.
///
/// Candidate cells are enumerated row-major over the in-scope columns and
/// the first `k` positions of a seeded partial Fisher–Yates shuffle are
/// masked, so the selection depends only on shape, scope, rate and seed.
pub fn apply_mcar(ds: &Dataset, plan: &MaskPlan) -> Result<Masked> {
    if !(0.0..1.0).contains(&plan.rate) {
        return Err(Error::invalid(format!("missing rate {} outside [0, 1)", plan.rate)));
    }
    let cols: Vec<usize> = if plan.scope.is_empty() {
        (0..ds.n_cols()).collect()
    } else {
        let mut cols = Vec::new();
        for name in &plan.scope {
            match ds.column_index(name) {
                Some(j) => cols.push(j),
                None => return Err(Error::invalid(format!("unknown column '{name}' in mask scope"))),
            }
        }
        cols.sort_unstable();
        cols
    };
    let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(ds.n_rows() * cols.len());
    for i in 0..ds.n_rows() {
        for &j in &cols {
            if !ds.is_observed(i, j) {
                return Err(Error::invalid(format!(
                    "cell ({}, '{}') is already missing; masking expects complete in-scope data",
                    i + 1,
                    ds.specs()[j].name
                )));
            }
            candidates.push((i, j));
        }
    }
    let k = (plan.rate * candidates.len() as f64).round() as usize;
    let mut r = rng::seeded(plan.seed);
    let total = candidates.len();
    for pos in 0..k {
        let pick = r.random_range(pos..total);
        candidates.swap(pos, pick);
    }
    let mut mask = ds.mask().clone();
    for &(i, j) in &candidates[..k] {
        mask[(i, j)] = false;
    }
    Ok(Masked {
        masked: ds.with_mask(mask)?,
        truth: ds.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn complete(n: usize, d: usize) -> Dataset {
        Dataset::complete(
            DMatrix::from_fn(n, d, |i, j| (i * d + j) as f64),
            Dataset::generic_specs(d),
        )
        .unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = complete(10, 3);
        let m = apply_mcar(&ds, &MaskPlan::new(0.0, 1)).unwrap();
        assert_eq!(m.masked, ds);
    }

    #[test]
    fn exact_count() {
        let ds = complete(1000, 6);
        let m = apply_mcar(&ds, &MaskPlan::new(0.3, 5)).unwrap();
        assert_eq!(m.masked.n_missing(), 1800);
        assert_eq!(m.truth, ds);
    }

    #[test]
    fn deterministic() {
        let ds = complete(50, 4);
        let a = apply_mcar(&ds, &MaskPlan::new(0.3, 77)).unwrap();
        let b = apply_mcar(&ds, &MaskPlan::new(0.3, 77)).unwrap();
        assert_eq!(a.masked.mask(), b.masked.mask());
        let c = apply_mcar(&ds, &MaskPlan::new(0.3, 78)).unwrap();
        assert_ne!(a.masked.mask(), c.masked.mask());
    }

    #[test]
    fn scope_limits_columns() {
        let ds = complete(100, 3);
        let m = apply_mcar(&ds, &MaskPlan::new(0.5, 3).with_scope(["x1"])).unwrap();
        assert_eq!(m.masked.missing_counts(), vec![0, 50, 0]);
        assert!(apply_mcar(&ds, &MaskPlan::new(0.5, 3).with_scope(["nope"])).is_err());
    }

    #[test]
    fn rejects_bad_rate_and_incomplete_input() {
        let ds = complete(4, 2);
        assert!(apply_mcar(&ds, &MaskPlan::new(1.0, 0)).is_err());
        assert!(apply_mcar(&ds, &MaskPlan::new(-0.1, 0)).is_err());
        let once = apply_mcar(&ds, &MaskPlan::new(0.5, 0)).unwrap().masked;
        assert!(apply_mcar(&once, &MaskPlan::new(0.1, 0)).is_err());
    }

    #[test]
    fn per_column_fraction_within_three_sigma() {
        let (n, d, rate) = (10_000, 4, 0.3);
        let ds = complete(n, d);
        let m = apply_mcar(&ds, &MaskPlan::new(rate, 2024)).unwrap();
        let sigma = (rate * (1.0 - rate) / n as f64).sqrt();
        for c in m.masked.missing_counts() {
            let frac = c as f64 / n as f64;
            assert!((frac - rate).abs() < 3.0 * sigma, "fraction {frac}");
        }
    }
}
