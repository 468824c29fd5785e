//! Fixtures shared by the benchmarks.

use sesa_core::missingness::{apply_mcar, MaskPlan};
use sesa_core::synth::correlated_dataset;
use sesa_core::Dataset;

/// `n × d` equicorrelated (rho 0.8) data with 30% of cells hidden.
pub fn masked(n: usize, d: usize, seed: u64) -> Dataset {
    let full = correlated_dataset(n, d, 0.8, seed).expect("valid covariance");
    apply_mcar(&full, &MaskPlan::new(0.3, seed)).expect("complete input").masked
}
