//! Single-head self-attention over the rows (samples) of a filled data
//! matrix.
//!
//! `A = softmax(X Wq (X Wk)^T / sqrt(dk))` is `n × n`: row `i` holds the
//! weights sample `i` places on every sample, and the output row `i` is the
//! `A`-weighted combination of the value rows `X Wv`.
//!
//! Internally the logits are built transposed (`K Q^T`), so each sample's
//! softmax runs down one contiguous column of the column-major matrix.

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Row-block size above which the output path stops materializing the full
/// `n × n` weight matrix.
pub const DEFAULT_BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

impl AttentionParams {
    pub fn new(wq: DMatrix<f64>, wk: DMatrix<f64>, wv: DMatrix<f64>) -> Result<Self> {
        let d = wq.nrows();
        if wq.ncols() == 0 || wk.shape() != wq.shape() || wv.shape() != (d, d) {
            return Err(Error::shape(format!(
                "wq {:?}, wk {:?}, wv {:?}: need wq, wk d×k with k ≥ 1 and wv d×d",
                wq.shape(),
                wk.shape(),
                wv.shape()
            )));
        }
        Ok(AttentionParams { wq, wk, wv })
    }

    /// Uniform entries in `[-1/sqrt(d), 1/sqrt(d)]`, drawn wq, wk, wv in turn.
    pub fn init(d: usize, dk: usize, seed: u64) -> Result<Self> {
        if d == 0 || dk == 0 {
            return Err(Error::invalid("attention needs d ≥ 1 and dk ≥ 1"));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut r = rng::seeded(seed);
        let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| r.random_range(-bound..=bound));
        let wq = draw(d, dk);
        let wk = draw(d, dk);
        let wv = draw(d, d);
        AttentionParams::new(wq, wk, wv)
    }

    pub fn zeros(d: usize, dk: usize) -> Self {
        AttentionParams {
            wq: DMatrix::zeros(d, dk),
            wk: DMatrix::zeros(d, dk),
            wv: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn dk(&self) -> usize {
        self.wq.ncols()
    }

    pub fn l1_norm(&self) -> f64 {
        self.matrices().iter().flat_map(|m| m.iter()).map(|v| v.abs()).sum()
    }

    pub fn matrices(&self) -> [&DMatrix<f64>; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    pub fn n_params(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }
}

/// Numerically stable softmax of each column, in place.
fn softmax_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        col /= sum;
    }
}

/// Softmax of every row: subtract the row max, exponentiate, normalize.
pub fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut t = m.transpose();
    softmax_columns(&mut t);
    t.transpose()
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: DMatrix<f64>,
    /// Row-stochastic `n × n` attention weights.
    pub weights: DMatrix<f64>,
}

/// Intermediate products kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Transposed weights: column `i` is the weight row of sample `i`.
    pub at: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

fn check_input(x: &DMatrix<f64>, p: &AttentionParams) -> Result<()> {
    if x.ncols() != p.dim() {
        return Err(Error::shape(format!(
            "input has {} columns, attention expects {}",
            x.ncols(),
            p.dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::shape("attention input has no rows"));
    }
    Ok(())
}

pub(crate) fn forward_cached(x: &DMatrix<f64>, p: &AttentionParams) -> Result<ForwardCache> {
    check_input(x, p)?;
    let scale = 1.0 / (p.dk() as f64).sqrt();
    let q = x * &p.wq;
    let k = x * &p.wk;
    let v = x * &p.wv;
    let mut at = &k * q.transpose();
    at *= scale;
    softmax_columns(&mut at);
    let output = at.tr_mul(&v);
    Ok(ForwardCache { q, k, v, at, output })
}

pub fn attention_forward(x: &DMatrix<f64>, p: &AttentionParams) -> Result<AttentionOutput> {
    let c = forward_cached(x, p)?;
    Ok(AttentionOutput {
        output: c.output,
        weights: c.at.transpose(),
    })
}

/// Attention output computed `block_rows` query rows at a time; equal to
/// `attention_forward(x, p).output` without holding all `n × n` weights.
pub fn attention_output(x: &DMatrix<f64>, p: &AttentionParams, block_rows: usize) -> Result<DMatrix<f64>> {
    check_input(x, p)?;
    let block_rows = block_rows.max(1);
    let n = x.nrows();
    if n <= block_rows {
        return Ok(forward_cached(x, p)?.output);
    }
    let scale = 1.0 / (p.dk() as f64).sqrt();
    let q = x * &p.wq;
    let k = x * &p.wk;
    let v = x * &p.wv;
    let mut out = DMatrix::zeros(n, p.dim());
    let mut start = 0;
    while start < n {
        let len = block_rows.min(n - start);
        let mut at = &k * q.rows(start, len).transpose();
        at *= scale;
        softmax_columns(&mut at);
        out.rows_mut(start, len).copy_from(&at.tr_mul(&v));
        start += len;
    }
    Ok(out)
}

/// Replaces the cells flagged in `provenance` with the attention output;
/// every other cell keeps its original value.
pub fn refine(ds_filled: &Dataset, p: &AttentionParams, provenance: &nalgebra::DMatrix<bool>) -> Result<Dataset> {
    if !ds_filled.is_complete() {
        return Err(Error::invalid("refine needs a filled dataset"));
    }
    if provenance.shape() != ds_filled.values().shape() {
        return Err(Error::shape("provenance shape differs from data"));
    }
    if !provenance.iter().any(|&b| b) {
        return Ok(ds_filled.clone());
    }
    let out = attention_output(ds_filled.values(), p, DEFAULT_BLOCK_ROWS)?;
    if !crate::linalg::is_finite(&out) {
        return Err(Error::numerical("attention output is not finite"));
    }
    Ok(ds_filled.overwrite(&out, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    const E_RATIO: f64 = 0.731_058_578_630_004_9; // e / (1 + e)

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, 1000.0, 0.0]));
        assert_eq!(s[(0, 0)], 0.5);
        assert!((s[(1, 1)] - E_RATIO).abs() < 1e-15);
        assert!((s[(1, 0)] - (1.0 - E_RATIO)).abs() < 1e-15);
        assert_eq!(s[(2, 0)], 1.0);
        assert!(s[(2, 1)] < 1e-300);
        for r in s.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_hand_computed() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = AttentionParams::new(one.clone(), one.clone(), one).unwrap();
        let out = attention_forward(&x, &p).unwrap();
        assert_eq!(out.weights[(0, 0)], 0.5);
        assert_eq!(out.weights[(0, 1)], 0.5);
        assert!((out.weights[(1, 1)] - E_RATIO).abs() < 1e-15);
        assert!((out.output[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((out.output[(1, 0)] - E_RATIO).abs() < 1e-15);
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let x = DMatrix::from_fn(5, 3, |i, j| (i as f64 * 0.7 + j as f64).sin());
        let mut p = AttentionParams::init(3, 3, 1).unwrap();
        p.wq.fill(0.0);
        let out = attention_forward(&x, &p).unwrap();
        assert!(out.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        let v = &x * &p.wv;
        for j in 0..3 {
            let mean = v.column(j).mean();
            for i in 0..5 {
                assert!((out.output[(i, j)] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singleton_row() {
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -1.2]);
        let p = AttentionParams::init(2, 2, 4).unwrap();
        let out = attention_forward(&x, &p).unwrap();
        assert_eq!(out.weights[(0, 0)], 1.0);
        assert!((out.output.clone() - &x * &p.wv).amax() < 1e-15);
    }

    #[test]
    fn blocked_output_matches_full() {
        let x = DMatrix::from_fn(37, 4, |i, j| ((i * 7 + j * 3) as f64).cos());
        let p = AttentionParams::init(4, 2, 9).unwrap();
        let full = attention_forward(&x, &p).unwrap().output;
        let blocked = attention_output(&x, &p, 8).unwrap();
        assert!((full - blocked).amax() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let p = AttentionParams::init(3, 3, 0).unwrap();
        assert!(attention_forward(&DMatrix::zeros(4, 2), &p).is_err());
        assert!(AttentionParams::new(DMatrix::zeros(3, 2), DMatrix::zeros(3, 1), DMatrix::zeros(3, 3)).is_err());
        assert!(AttentionParams::new(DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = AttentionParams::init(4, 4, 11).unwrap();
        let b = AttentionParams::init(4, 4, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.matrices().iter().flat_map(|m| m.iter()).all(|v| v.abs() <= 0.5));
        assert_ne!(a, AttentionParams::init(4, 4, 12).unwrap());
    }

    #[test]
    fn refine_without_provenance_is_identity() {
        let ds = Dataset::complete(DMatrix::from_fn(4, 2, |i, j| (i + j) as f64), Dataset::generic_specs(2)).unwrap();
        let p = AttentionParams::init(2, 2, 3).unwrap();
        let none = DMatrix::from_element(4, 2, false);
        assert_eq!(refine(&ds, &p, &none).unwrap(), ds);
    }
}
