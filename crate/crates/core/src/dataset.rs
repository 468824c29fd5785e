//! Tabular data with an explicit missingness mask.
//!
//! A [`Dataset`] stores an `n × d` value matrix next to a boolean mask
//! (`true` = observed). Cells with `mask = false` hold [`MISSING_SENTINEL`];
//! every consumer branches on the mask and never reads that value.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value stored in unobserved cells.
pub const MISSING_SENTINEL: f64 = 0.0;

const VARIANCE_FALLBACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Ordered category labels; level `i` encodes as `i as f64`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_max: Option<f64>,
}

impl VariableSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Continuous,
            levels: Vec::new(),
            observed_min: None,
            observed_max: None,
        }
    }

    pub fn ordinal<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        VariableSpec {
            name: name.into(),
            kind: VariableKind::Ordinal,
            levels: levels.into_iter().map(Into::into).collect(),
            observed_min: None,
            observed_max: None,
        }
    }

    pub fn is_ordinal(&self) -> bool {
        self.kind == VariableKind::Ordinal
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            VariableKind::Ordinal => {
                if self.levels.is_empty() {
                    return Err(Error::invalid(format!("ordinal variable '{}' has no levels", self.name)));
                }
                let unique: BTreeSet<&String> = self.levels.iter().collect();
                if unique.len() != self.levels.len() {
                    return Err(Error::invalid(format!("ordinal variable '{}' has duplicate levels", self.name)));
                }
            }
            VariableKind::Continuous => {
                if let (Some(lo), Some(hi)) = (self.observed_min, self.observed_max) {
                    if lo > hi {
                        return Err(Error::invalid(format!("variable '{}': observed_min > observed_max", self.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves a CSV token to a level index: exact label first, then an
    /// integer index in range.
    pub fn level_index(&self, token: &str) -> Option<usize> {
        if let Some(i) = self.levels.iter().position(|l| l == token) {
            return Some(i);
        }
        let t = token.trim();
        let idx = t.parse::<f64>().ok()?;
        if idx.fract() == 0.0 && idx >= 0.0 && (idx as usize) < self.levels.len() {
            Some(idx as usize)
        } else {
            None
        }
    }
}

/// Reads a JSON array of `{name, kind, levels?}` objects.
pub fn load_variable_specs(path: impl AsRef<Path>) -> Result<Vec<VariableSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_variable_specs(&text)
}

pub fn parse_variable_specs(text: &str) -> Result<Vec<VariableSpec>> {
    let specs: Vec<VariableSpec> = serde_json::from_str(text)?;
    let mut names = BTreeSet::new();
    for s in &specs {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::invalid(format!("variable '{}' declared twice", s.name)));
        }
    }
    Ok(specs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub lo: f64,
    pub hi: f64,
}

impl ColumnScale {
    pub fn forward(&self, x: f64) -> f64 {
        if self.hi > self.lo {
            (x - self.lo) / (self.hi - self.lo)
        } else {
            0.5
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        if self.hi > self.lo {
            self.lo + y * (self.hi - self.lo)
        } else {
            self.lo
        }
    }
}

/// An ordinal CSV token not yet mapped to its level index.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingLabel {
    pub row: usize,
    pub col: usize,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    specs: Vec<VariableSpec>,
    normalization: Option<Vec<ColumnScale>>,
    pending: Vec<PendingLabel>,
}

/// A completed dataset together with the cells an imputer filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub data: Dataset,
    /// `true` where the value came from the imputer.
    pub provenance: DMatrix<bool>,
}

impl Imputation {
    pub fn imputed_count(&self) -> usize {
        self.provenance.iter().filter(|&&p| p).count()
    }
}

impl Dataset {
    pub fn new(mut values: DMatrix<f64>, mask: DMatrix<bool>, specs: Vec<VariableSpec>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::shape(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        if values.ncols() != specs.len() {
            return Err(Error::shape(format!(
                "{} columns but {} variable specs",
                values.ncols(),
                specs.len()
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        for (v, &m) in values.iter_mut().zip(mask.iter()) {
            if !m {
                *v = MISSING_SENTINEL;
            } else if !v.is_finite() {
                return Err(Error::invalid("observed cells must be finite"));
            }
        }
        Ok(Dataset {
            values,
            mask,
            specs,
            normalization: None,
            pending: Vec::new(),
        })
    }

    pub fn complete(values: DMatrix<f64>, specs: Vec<VariableSpec>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Dataset::new(values, mask, specs)
    }

    /// Builds a dataset from rows of optional cells (`None` = missing).
    pub fn from_rows(rows: &[Vec<Option<f64>>], specs: Vec<VariableSpec>) -> Result<Self> {
        let n = rows.len();
        let d = specs.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged rows"));
        }
        let values = DMatrix::from_fn(n, d, |i, j| rows[i][j].unwrap_or(MISSING_SENTINEL));
        let mask = DMatrix::from_fn(n, d, |i, j| rows[i][j].is_some());
        Dataset::new(values, mask, specs)
    }

    /// All-continuous specs named `x0, x1, ...`.
    pub fn generic_specs(d: usize) -> Vec<VariableSpec> {
        (0..d).map(|j| VariableSpec::continuous(format!("x{j}"))).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn specs(&self) -> &[VariableSpec] {
        &self.specs
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn normalization(&self) -> Option<&[ColumnScale]> {
        self.normalization.as_deref()
    }

    pub fn pending_labels(&self) -> &[PendingLabel] {
        &self.pending
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.mask[(row, col)].then(|| self.values[(row, col)])
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[(row, col)]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn observed_column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).filter_map(|i| self.get(i, col)).collect()
    }

    pub fn missing_counts(&self) -> Vec<usize> {
        (0..self.n_cols())
            .map(|j| (0..self.n_rows()).filter(|&i| !self.mask[(i, j)]).count())
            .collect()
    }

    pub fn n_missing(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub(crate) fn ensure_numeric(&self) -> Result<()> {
        match self.pending.first() {
            None => Ok(()),
            Some(p) => Err(Error::invalid(format!(
                "ordinal label '{}' at row {} column '{}' is not encoded yet",
                p.token, p.row, self.specs[p.col].name
            ))),
        }
    }

    /// Same data, different mask. Newly hidden cells take the sentinel.
    pub(crate) fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        if mask.shape() != self.mask.shape() {
            return Err(Error::shape("mask shape differs from data"));
        }
        for (i, j) in cells(&mask) {
            if mask[(i, j)] && !self.mask[(i, j)] {
                return Err(Error::invalid("cannot reveal a missing cell"));
            }
        }
        let mut out = self.clone();
        out.mask = mask;
        for (v, &m) in out.values.iter_mut().zip(out.mask.iter()) {
            if !m {
                *v = MISSING_SENTINEL;
            }
        }
        Ok(out)
    }

    /// Completes the dataset: observed cells are kept, every missing cell
    /// takes the matching entry of `fill`.
    pub fn fill(&self, fill: &DMatrix<f64>) -> Result<Imputation> {
        if fill.shape() != self.values.shape() {
            return Err(Error::shape("fill matrix shape differs from data"));
        }
        let mut data = self.clone();
        for ((v, &m), &f) in data.values.iter_mut().zip(self.mask.iter()).zip(fill.iter()) {
            if !m {
                if !f.is_finite() {
                    return Err(Error::numerical("imputed value is not finite"));
                }
                *v = f;
            }
        }
        let provenance = self.mask.map(|m| !m);
        data.mask.fill(true);
        Ok(Imputation { data, provenance })
    }

    /// Overwrites every cell flagged in `which`; they become observed.
    pub(crate) fn overwrite(&self, values: &DMatrix<f64>, which: &DMatrix<bool>) -> Dataset {
        let mut out = self.clone();
        for (i, j) in cells(which) {
            if which[(i, j)] {
                out.values[(i, j)] = values[(i, j)];
                out.mask[(i, j)] = true;
            }
        }
        out
    }
}

pub(crate) fn cells(m: &DMatrix<bool>) -> impl Iterator<Item = (usize, usize)> {
    let (n, d) = m.shape();
    (0..n).flat_map(move |i| (0..d).map(move |j| (i, j)))
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub missing_tokens: BTreeSet<String>,
    /// Unparseable continuous cells are errors when set, missing otherwise.
    pub strict: bool,
    /// Ordinal tokens that match no level become missing instead of failing
    /// at encode time.
    pub lenient_ordinal: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            missing_tokens: ["", "NA", "NaN"].iter().map(|s| s.to_string()).collect(),
            strict: true,
            lenient_ordinal: false,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, specs: &[VariableSpec], opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_csv(&text, specs, opts)
}

fn split_records(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let rows = if header.len() == 1 {
        // The csv reader skips blank lines; in a one-column file a blank line
        // is an empty cell.
        text.lines()
            .skip(1)
            .map(|line| {
                let line = line.trim_end_matches('\r');
                let mut one = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .from_reader(line.as_bytes());
                match one.records().next() {
                    Some(r) => r.map(|r| vec![r.get(0).unwrap_or("").to_string()]),
                    None => Ok(vec![String::new()]),
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        rdr.records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?
    };
    Ok((header, rows))
}

pub fn parse_csv(text: &str, specs: &[VariableSpec], opts: &LoadOptions) -> Result<Dataset> {
    let (header, rows) = split_records(text)?;
    if header.len() != specs.len() {
        return Err(Error::HeaderMismatch(format!(
            "file has {} columns, spec declares {}",
            header.len(),
            specs.len()
        )));
    }
    // column j of the dataset comes from file column source[j]
    let mut source = Vec::with_capacity(specs.len());
    for s in specs {
        match header.iter().position(|h| *h == s.name) {
            Some(p) => source.push(p),
            None => {
                return Err(Error::HeaderMismatch(format!(
                    "variable '{}' not in header [{}]",
                    s.name,
                    header.join(", ")
                )))
            }
        }
    }
    let n = rows.len();
    let d = specs.len();
    let mut values = DMatrix::from_element(n, d, MISSING_SENTINEL);
    let mut mask = DMatrix::from_element(n, d, false);
    let mut pending = Vec::new();
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != d {
            return Err(Error::Parse {
                row: i + 1,
                column: String::new(),
                message: format!("expected {d} fields, found {}", rec.len()),
            });
        }
        for (j, spec) in specs.iter().enumerate() {
            let token = rec[source[j]].trim();
            if opts.missing_tokens.contains(token) {
                continue;
            }
            match spec.kind {
                VariableKind::Continuous => match token.parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        values[(i, j)] = v;
                        mask[(i, j)] = true;
                    }
                    _ if !opts.strict => {}
                    _ => {
                        return Err(Error::Parse {
                            row: i + 1,
                            column: spec.name.clone(),
                            message: format!("'{token}' is not a number"),
                        })
                    }
                },
                VariableKind::Ordinal => {
                    if opts.lenient_ordinal && spec.level_index(token).is_none() {
                        continue;
                    }
                    mask[(i, j)] = true;
                    pending.push(PendingLabel {
                        row: i,
                        col: j,
                        token: token.to_string(),
                    });
                }
            }
        }
    }
    let mut specs = specs.to_vec();
    for (j, s) in specs.iter_mut().enumerate() {
        if s.kind == VariableKind::Continuous {
            let obs: Vec<f64> = (0..n).filter(|&i| mask[(i, j)]).map(|i| values[(i, j)]).collect();
            s.observed_min = obs.iter().copied().reduce(f64::min);
            s.observed_max = obs.iter().copied().reduce(f64::max);
        }
    }
    let mut ds = Dataset::new(values, mask, specs)?;
    ds.pending = pending;
    let missing = ds.missing_counts();
    log::debug!("loaded {n} rows; missing per column {missing:?}");
    Ok(ds)
}

/// Maps every pending ordinal token to its level index.
pub fn encode_ordinal(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for p in &ds.pending {
        let spec = &ds.specs[p.col];
        match spec.level_index(&p.token) {
            Some(idx) => out.values[(p.row, p.col)] = idx as f64,
            None => {
                return Err(Error::Encoding {
                    row: p.row + 1,
                    column: spec.name.clone(),
                    label: p.token.clone(),
                })
            }
        }
    }
    out.pending.clear();
    Ok(out)
}

/// Min-max scales each column to `[0, 1]` from its observed cells.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    ds.ensure_numeric()?;
    let mut scales = Vec::with_capacity(ds.n_cols());
    for j in 0..ds.n_cols() {
        let obs = ds.observed_column(j);
        if obs.is_empty() {
            return Err(Error::Normalization(ds.specs[j].name.clone()));
        }
        let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        scales.push(ColumnScale { lo, hi });
    }
    Ok(apply_scales(ds, &scales))
}

/// Normalizes with externally supplied scales (e.g. those of the masked
/// data applied to its ground truth). Values may fall outside `[0, 1]`.
pub fn apply_scales(ds: &Dataset, scales: &[ColumnScale]) -> Dataset {
    let mut out = ds.clone();
    for (i, j) in cells(&ds.mask) {
        if ds.mask[(i, j)] {
            out.values[(i, j)] = scales[j].forward(ds.values[(i, j)]);
        }
    }
    out.normalization = Some(scales.to_vec());
    out
}

pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let scales = ds
        .normalization
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset is not normalized"))?;
    let mut out = ds.clone();
    for (i, j) in cells(&ds.mask) {
        if ds.mask[(i, j)] {
            out.values[(i, j)] = scales[j].inverse(ds.values[(i, j)]);
        }
    }
    out.normalization = None;
    Ok(out)
}

/// Rounds ordinal cells to the nearest valid level (ties go to the lower
/// level) and clamps to the level range.
pub fn snap_ordinal(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for (j, spec) in ds.specs.iter().enumerate() {
        if !spec.is_ordinal() {
            continue;
        }
        let top = (spec.levels.len() - 1) as f64;
        for i in 0..ds.n_rows() {
            if ds.mask[(i, j)] {
                let v = ds.values[(i, j)];
                let snapped = (v - 0.5).ceil().clamp(0.0, top) + 0.0;
                out.values[(i, j)] = snapped;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PairwiseStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Means from observed cells and pairwise-complete ML covariances.
pub fn pairwise_stats(ds: &Dataset) -> Result<PairwiseStats> {
    ds.ensure_numeric()?;
    let (n, d) = (ds.n_rows(), ds.n_cols());
    let mut warnings = Vec::new();
    let mut mean = DVector::zeros(d);
    for j in 0..d {
        let obs = ds.observed_column(j);
        if obs.is_empty() {
            return Err(Error::invalid(format!("column '{}' has no observed cells", ds.specs[j].name)));
        }
        mean[j] = obs.iter().sum::<f64>() / obs.len() as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let rows: Vec<usize> = (0..n).filter(|&i| ds.mask[(i, a)] && ds.mask[(i, b)]).collect();
            if rows.len() < 2 {
                if a == b {
                    warnings.push(format!(
                        "column '{}' has fewer than 2 observed cells; variance set to {VARIANCE_FALLBACK}",
                        ds.specs[a].name
                    ));
                    cov[(a, a)] = VARIANCE_FALLBACK;
                } else {
                    warnings.push(format!(
                        "columns '{}' and '{}' share fewer than 2 rows; covariance set to 0",
                        ds.specs[a].name, ds.specs[b].name
                    ));
                }
                continue;
            }
            let m = rows.len() as f64;
            let ma = rows.iter().map(|&i| ds.values[(i, a)]).sum::<f64>() / m;
            let mb = rows.iter().map(|&i| ds.values[(i, b)]).sum::<f64>() / m;
            let c = rows
                .iter()
                .map(|&i| (ds.values[(i, a)] - ma) * (ds.values[(i, b)] - mb))
                .sum::<f64>()
                / m;
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    for j in 0..d {
        if cov[(j, j)] <= 0.0 {
            cov[(j, j)] = VARIANCE_FALLBACK;
        }
    }
    Ok(PairwiseStats { mean, cov, warnings })
}

/// Writes the dataset as CSV. Ordinal cells are written as their level
/// labels when `labels` is set; missing cells are written empty.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W, labels: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.specs.iter().map(|s| s.name.as_str()))?;
    for i in 0..ds.n_rows() {
        let rec: Vec<String> = (0..ds.n_cols())
            .map(|j| match ds.get(i, j) {
                None => String::new(),
                Some(v) => {
                    let spec = &ds.specs[j];
                    if labels && spec.is_ordinal() && v.fract() == 0.0 && v >= 0.0 {
                        if let Some(l) = spec.levels.get(v as usize) {
                            return l.clone();
                        }
                    }
                    format_value(v)
                }
            })
            .collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

pub fn write_bool_csv<W: Write>(names: &[String], m: &DMatrix<bool>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| if m[(i, j)] { "1" } else { "0" }))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}
