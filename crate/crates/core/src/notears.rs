//! Linear NOTEARS: least-squares DAG learning under the smooth acyclicity
//! constraint `h(W) = tr(exp(W∘W)) − d = 0`, solved by an augmented
//! Lagrangian whose inner problems run Adam with an L1 proximal step.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::optim::{AdamMoments, BETA2, EPSILON};
use crate::sem::{Equation, SemSpec};

/// `h` below this counts as acyclic when verifying thresholded graphs.
pub const ACYCLIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NotearsConfig {
    pub lambda1: f64,
    pub h_tol: f64,
    pub rho_max: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub threshold: f64,
    /// Cap on dual updates.
    pub max_outer: usize,
    /// Scale columns to unit variance before fitting. Off by default: it
    /// erases the variance ordering the least-squares score relies on to
    /// orient edges, but makes the edge set invariant to column units.
    pub standardize: bool,
}

impl Default for NotearsConfig {
    fn default() -> Self {
        NotearsConfig {
            lambda1: 0.1,
            h_tol: 1e-8,
            rho_max: 1e16,
            inner_lr: 3e-3,
            inner_steps: 500,
            threshold: 0.3,
            max_outer: 100,
            standardize: false,
        }
    }
}

impl NotearsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.h_tol > 0.0
            && self.rho_max > 1.0
            && self.inner_lr > 0.0
            && self.inner_steps > 0
            && self.threshold >= 0.0
            && self.max_outer > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad NOTEARS config {self:?}")))
        }
    }
}

/// `w[(i, j)]` is the strength of edge `i -> j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    pub w: DMatrix<f64>,
    pub names: Vec<String>,
    /// Weights on the standardized scale, when the graph was learned from
    /// standardized data. Thresholding uses these when present.
    pub standardized: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    names: Vec<String>,
    weights: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardized: Option<Vec<Vec<f64>>>,
    threshold: Option<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape(format!("weight matrix must be {d}×{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl WeightedGraph {
    pub fn new(w: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let d = names.len();
        if w.shape() != (d, d) {
            return Err(Error::shape(format!("weights {:?} vs {} names", w.shape(), d)));
        }
        if (0..d).any(|i| w[(i, i)] != 0.0) {
            return Err(Error::invalid("graph weights must have a zero diagonal"));
        }
        Ok(WeightedGraph {
            w,
            names,
            standardized: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Weights the threshold is compared against.
    pub fn strengths(&self) -> &DMatrix<f64> {
        self.standardized.as_ref().unwrap_or(&self.w)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.dim();
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                if self.w[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges()
            .into_iter()
            .map(|(i, j)| (self.names[i].clone(), self.names[j].clone()))
            .collect()
    }

    pub fn to_json(&self, threshold: Option<f64>) -> Result<String> {
        let g = GraphJson {
            names: self.names.clone(),
            weights: rows_of(&self.w),
            standardized: self.standardized.as_ref().map(rows_of),
            threshold,
        };
        Ok(serde_json::to_string_pretty(&g)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: GraphJson = serde_json::from_str(text)?;
        let d = g.names.len();
        let mut out = WeightedGraph::new(from_rows(&g.weights, d)?, g.names)?;
        out.standardized = g.standardized.map(|s| from_rows(&s, d)).transpose()?;
        Ok(out)
    }

    /// Graphviz rendering; edge labels carry the weights.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph G {\n");
        for name in &self.names {
            let _ = writeln!(s, "  \"{name}\";");
        }
        for (i, j) in self.edges() {
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [label=\"{:.3}\"];",
                self.names[i], self.names[j], self.w[(i, j)]
            );
        }
        s.push_str("}\n");
        s
    }
}

/// `exp(m)` by scaling and squaring with a truncated Taylor series.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "matrix_exp needs a square matrix");
    if d == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Induced 1-norm.
    let norm = m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(s);
    let mut out = DMatrix::identity(d, d);
    let mut term = DMatrix::identity(d, d);
    for k in 1..=30 {
        term = &term * &a / k as f64;
        out += &term;
        if term.amax() <= f64::EPSILON * out.amax() * 1e-3 {
            break;
        }
    }
    for _ in 0..s {
        out = &out * &out;
    }
    out
}

/// `h(w) = tr(exp(w∘w)) − d` and its gradient `2·exp(w∘w)ᵀ ∘ w`.
pub fn acyclicity_h(w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let e = matrix_exp(&w.component_mul(w));
    let h = e.trace() - w.nrows() as f64;
    let grad = e.transpose().component_mul(w) * 2.0;
    (h, grad)
}

/// Centers every column, and scales it to unit variance when `scale`.
/// Returns the scales used.
fn prepare(ds: &Dataset, scale: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !ds.is_complete() {
        return Err(Error::invalid("NOTEARS needs complete (or imputed) data"));
    }
    let (n, d) = ds.values().shape();
    if d < 2 {
        return Err(Error::invalid("NOTEARS needs at least two variables"));
    }
    if n < 2 {
        return Err(Error::invalid("NOTEARS needs at least two rows"));
    }
    let mut x = ds.values().clone();
    let mut sd = DVector::from_element(d, 1.0);
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let s = (col.norm_squared() / n as f64).sqrt();
        if s < 1e-12 {
            return Err(Error::invalid(format!("column '{}' is constant", ds.specs()[j].name)));
        }
        if scale {
            col /= s;
            sd[j] = s;
        }
    }
    Ok((x, sd))
}

/// Least-squares loss `½n⁻¹‖X − XW‖²` and its gradient.
fn ls_loss(x: &DMatrix<f64>, w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let r = x - x * w;
    let loss = 0.5 / n * r.norm_squared();
    let grad = -(x.tr_mul(&r)) / n;
    (loss, grad)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

#[derive(Debug, Clone)]
pub struct NotearsFit {
    /// Unthresholded graph; `w` in data units, `standardized` as fitted.
    pub graph: WeightedGraph,
    pub h: f64,
    pub rho: f64,
    pub outer_iterations: usize,
    /// False when `rho` hit `rho_max` before `h < h_tol`.
    pub converged: bool,
    pub warnings: Vec<String>,
}

struct Penalty {
    rho: f64,
    alpha: f64,
}

/// Inner problem: Adam on the smooth part, then a soft-threshold for the
/// L1 term in the same diagonal metric Adam steps in (threshold
/// `lr·λ1 / (√v̂ + ε)` per coordinate). Diagonal pinned to zero.
fn solve_inner(x: &DMatrix<f64>, w0: &DMatrix<f64>, pen: &Penalty, cfg: &NotearsConfig) -> DMatrix<f64> {
    let d = w0.nrows();
    let mut w = w0.clone();
    let mut adam = AdamMoments::new(d * d);
    let shrink = cfg.inner_lr * cfg.lambda1;
    for t in 1..=cfg.inner_steps {
        let (_, g_loss) = ls_loss(x, &w);
        let (h, g_h) = acyclicity_h(&w);
        let g = g_loss + g_h * (pen.rho * h + pen.alpha);
        adam.step(w.as_mut_slice(), g.as_slice(), cfg.inner_lr, t);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for (v, second) in w.iter_mut().zip(&adam.v) {
            *v = soft_threshold(*v, shrink / ((second / c2).sqrt() + EPSILON));
        }
        w.fill_diagonal(0.0);
    }
    w
}

/// Learns a weighted DAG from complete data. Columns are centered (and
/// standardized if configured); `w` is always in data units, mapped back
/// via `w_ij · σ_j / σ_i` when standardized.
pub fn notears_fit(ds: &Dataset, cfg: &NotearsConfig) -> Result<NotearsFit> {
    cfg.validate()?;
    let (x, sd) = prepare(ds, cfg.standardize)?;
    let d = x.ncols();
    let mut w = DMatrix::zeros(d, d);
    let mut pen = Penalty { rho: 1.0, alpha: 0.0 };
    let mut h = f64::INFINITY;
    let mut outer = 0;
    let mut converged = false;
    while outer < cfg.max_outer {
        outer += 1;
        let mut next;
        let mut h_next;
        loop {
            next = solve_inner(&x, &w, &pen, cfg);
            h_next = acyclicity_h(&next).0;
            if h_next > 0.25 * h && pen.rho < cfg.rho_max {
                pen.rho *= 10.0;
            } else {
                break;
            }
        }
        w = next;
        h = h_next;
        pen.alpha += pen.rho * h;
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("NOTEARS iterate diverged"));
        }
        if h <= cfg.h_tol {
            converged = true;
            break;
        }
        if pen.rho >= cfg.rho_max {
            break;
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("acyclicity not reached: h = {h:.3e} with rho = {:.1e}", pen.rho));
        log::warn!("{}", warnings[0]);
    }
    let original = DMatrix::from_fn(d, d, |i, j| w[(i, j)] * sd[j] / sd[i]);
    let mut graph = WeightedGraph::new(original, ds.names())?;
    if cfg.standardize {
        graph.standardized = Some(w);
    }
    Ok(NotearsFit {
        graph,
        h,
        rho: pen.rho,
        outer_iterations: outer,
        converged,
        warnings,
    })
}

/// Zeroes every edge whose strength is below `threshold` and checks that
/// what remains is acyclic.
pub fn threshold_dag(g: &WeightedGraph, threshold: f64) -> Result<WeightedGraph> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid("threshold must be ≥ 0"));
    }
    let keep = g.strengths().map(|v| v.abs() >= threshold);
    let cut = |m: &DMatrix<f64>| m.zip_map(&keep, |v, k| if k { v } else { 0.0 });
    let out = WeightedGraph {
        w: cut(&g.w),
        names: g.names.clone(),
        standardized: g.standardized.as_ref().map(cut),
    };
    let (h, _) = acyclicity_h(&out.w.map(|v| if v != 0.0 { 1.0 } else { 0.0 }));
    if h >= ACYCLIC_TOL {
        return Err(Error::Cyclic(format!(
            "a cycle survives threshold {threshold}; try a larger threshold"
        )));
    }
    Ok(out)
}

/// Kahn's algorithm, lowest index first among ready nodes.
fn topological_order(g: &WeightedGraph) -> Result<Vec<usize>> {
    let d = g.dim();
    let mut indeg: Vec<usize> = (0..d).map(|j| (0..d).filter(|&i| g.w[(i, j)] != 0.0).count()).collect();
    let mut ready: BTreeSet<usize> = (0..d).filter(|&j| indeg[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for j in 0..d {
            if g.w[(i, j)] != 0.0 {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
    }
    if order.len() != d {
        return Err(Error::Cyclic("cannot order the variables of a cyclic graph".into()));
    }
    Ok(order)
}

/// One equation per node with parents, in topological order. With an
/// `outcome`, only the outcome and its ancestors get equations.
pub fn suggest_spec(g: &WeightedGraph, outcome: Option<&str>) -> Result<SemSpec> {
    let d = g.dim();
    let order = topological_order(g)?;
    let relevant: Vec<bool> = match outcome {
        None => vec![true; d],
        Some(name) => {
            let target = g
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("outcome '{name}' is not a graph variable")))?;
            let mut seen = vec![false; d];
            let mut stack = vec![target];
            seen[target] = true;
            while let Some(j) = stack.pop() {
                for i in 0..d {
                    if g.w[(i, j)] != 0.0 && !seen[i] {
                        seen[i] = true;
                        stack.push(i);
                    }
                }
            }
            seen
        }
    };
    let mut equations = Vec::new();
    for &j in &order {
        if !relevant[j] {
            continue;
        }
        let parents: Vec<usize> = (0..d).filter(|&i| g.w[(i, j)] != 0.0).collect();
        if parents.is_empty() {
            continue;
        }
        let mut parents = parents;
        parents.sort_by_key(|i| order.iter().position(|o| o == i));
        equations.push(Equation {
            outcome: g.names[j].clone(),
            predictors: parents.iter().map(|&i| g.names[i].clone()).collect(),
        });
    }
    SemSpec::from_equations(equations)
}

/// Structural Hamming distance between two adjacency patterns: extra,
/// missing and reversed edges each count once.
pub fn structural_hamming(a: &DMatrix<f64>, b: &DMatrix<f64>) -> usize {
    let d = a.nrows();
    let mut shd = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let ea = (a[(i, j)] != 0.0, a[(j, i)] != 0.0);
            let eb = (b[(i, j)] != 0.0, b[(j, i)] != 0.0);
            if ea != eb {
                shd += 1;
            }
        }
    }
    shd
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn expm_closed_forms() {
        assert_eq!(matrix_exp(&DMatrix::zeros(3, 3)), DMatrix::identity(3, 3));
        let e = matrix_exp(&DMatrix::identity(2, 2));
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-14);
        let e = matrix_exp(&m(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let (c, s) = (1f64.cosh(), 1f64.sinh());
        assert!((e[(0, 0)] - c).abs() / c < 1e-12 && (e[(0, 1)] - s).abs() / s < 1e-12);
    }

    #[test]
    fn expm_large_norm_against_scalar() {
        let e = matrix_exp(&DMatrix::from_diagonal_element(2, 2, 7.5));
        assert!((e[(1, 1)] - 7.5f64.exp()).abs() / 7.5f64.exp() < 1e-12);
    }

    #[test]
    fn h_examples() {
        assert_eq!(acyclicity_h(&DMatrix::zeros(3, 3)).0, 0.0);
        let upper = m(&[&[0.0, 1.5, -2.0], &[0.0, 0.0, 0.7], &[0.0, 0.0, 0.0]]);
        assert!(acyclicity_h(&upper).0.abs() < 1e-12);
        let cyc = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!((acyclicity_h(&cyc).0 - (2.0 * 1f64.cosh() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let g = WeightedGraph::new(m(&[&[0.0, 0.2], &[0.0, 0.0]]), vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(threshold_dag(&g, 0.0).unwrap(), g);
        assert!(threshold_dag(&g, 0.3).unwrap().edges().is_empty());
        let cyc = WeightedGraph::new(m(&[&[0.0, 0.9], &[0.8, 0.0]]), vec!["a".into(), "b".into()]).unwrap();
        assert!(matches!(threshold_dag(&cyc, 0.5), Err(Error::Cyclic(_))));
        assert!(threshold_dag(&cyc, 0.85).is_ok());
    }

    #[test]
    fn spec_from_chain() {
        let names = vec!["x".to_string(), "y".into(), "z".into()];
        let g = WeightedGraph::new(m(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]), names.clone()).unwrap();
        assert_eq!(suggest_spec(&g, None).unwrap().to_text(), "y ~ x\nz ~ y\n");
        assert_eq!(suggest_spec(&g, Some("y")).unwrap().to_text(), "y ~ x\n");
        let empty = WeightedGraph::new(DMatrix::zeros(3, 3), names).unwrap();
        assert!(suggest_spec(&empty, None).unwrap().is_empty());
    }

    #[test]
    fn shd_counts_reversal_once() {
        let a = m(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        let b = m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(structural_hamming(&a, &b), 2);
        assert_eq!(structural_hamming(&a, &a), 0);
    }

    #[test]
    fn json_round_trip() {
        let g = WeightedGraph::new(m(&[&[0.0, 0.5], &[0.0, 0.0]]), vec!["a".into(), "b".into()]).unwrap();
        let back = WeightedGraph::from_json(&g.to_json(Some(0.3)).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(g.to_dot().contains("\"a\" -> \"b\""));
    }
}
