//! Reference imputers: column mean, column median, k-nearest neighbours.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{Dataset, Imputation};
use crate::error::{Error, Result};

fn column_fill(ds: &Dataset, stat: impl Fn(usize, &mut Vec<f64>) -> f64) -> Result<Imputation> {
    ds.ensure_numeric()?;
    let counts = ds.missing_counts();
    let mut fill = DMatrix::zeros(ds.n_rows(), ds.n_cols());
    for j in 0..ds.n_cols() {
        if counts[j] == 0 {
            continue;
        }
        let mut obs = ds.observed_column(j);
        if obs.is_empty() {
            return Err(Error::invalid(format!(
                "column '{}' has no observed cells",
                ds.specs()[j].name
            )));
        }
        let v = stat(j, &mut obs);
        fill.column_mut(j).fill(v);
    }
    ds.fill(&fill)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Each missing cell takes its column's observed mean. Values are summed
/// in sorted order so the result does not depend on row order.
pub fn mean_impute(ds: &Dataset) -> Result<Imputation> {
    column_fill(ds, |_, obs| {
        obs.sort_by(f64::total_cmp);
        mean(obs)
    })
}

/// Each missing cell takes its column's observed median: the midpoint of
/// the two middle values for continuous columns, the lower one for ordinal
/// columns so the result stays a level.
pub fn median_impute(ds: &Dataset) -> Result<Imputation> {
    column_fill(ds, |j, obs| {
        obs.sort_by(f64::total_cmp);
        let n = obs.len();
        if n % 2 == 1 {
            obs[n / 2]
        } else if ds.specs()[j].is_ordinal() {
            obs[n / 2 - 1]
        } else {
            0.5 * (obs[n / 2 - 1] + obs[n / 2])
        }
    })
}

/// Distance over the columns both rows observe, scaled by `√(d / shared)`;
/// `None` when they share none.
fn partial_distance(x: &DMatrix<f64>, mask: &DMatrix<bool>, a: usize, b: usize) -> Option<f64> {
    let d = x.ncols();
    let mut shared = 0;
    let mut ss = 0.0;
    for j in 0..d {
        if mask[(a, j)] && mask[(b, j)] {
            shared += 1;
            let diff = x[(a, j)] - x[(b, j)];
            ss += diff * diff;
        }
    }
    (shared > 0).then(|| (ss * d as f64 / shared as f64).sqrt())
}

/// k-nearest-neighbour imputation on min-max normalized columns. A missing
/// cell takes the plain mean of that column over the `k` nearest rows that
/// observe it (ties broken by row index), or the column mean when no row
/// qualifies.
pub fn knn_impute(ds: &Dataset, k: usize) -> Result<Imputation> {
    if k == 0 {
        return Err(Error::invalid("k must be ≥ 1"));
    }
    ds.ensure_numeric()?;
    let (n, d) = ds.values().shape();
    let mask = ds.mask();
    let mut means = vec![0.0; d];
    let mut scaled = ds.values().clone();
    for j in 0..d {
        let obs = ds.observed_column(j);
        if obs.is_empty() {
            if ds.missing_counts()[j] > 0 {
                return Err(Error::invalid(format!(
                    "column '{}' has no observed cells",
                    ds.specs()[j].name
                )));
            }
            continue;
        }
        means[j] = mean(&obs);
        let lo = obs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for i in 0..n {
            scaled[(i, j)] = if span > 0.0 { (scaled[(i, j)] - lo) / span } else { 0.5 };
        }
    }

    let targets: Vec<usize> = (0..n).filter(|&i| (0..d).any(|j| !mask[(i, j)])).collect();
    let rows: Vec<(usize, Vec<(usize, f64)>)> = targets
        .par_iter()
        .map(|&i| {
            let mut neighbours: Vec<(f64, usize)> = (0..n)
                .filter(|&r| r != i)
                .filter_map(|r| partial_distance(&scaled, mask, i, r).map(|dist| (dist, r)))
                .collect();
            neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let filled = (0..d)
                .filter(|&j| !mask[(i, j)])
                .map(|j| {
                    let donors: Vec<f64> = neighbours
                        .iter()
                        .filter(|&&(_, r)| mask[(r, j)])
                        .take(k)
                        .map(|&(_, r)| ds.values()[(r, j)])
                        .collect();
                    let v = if donors.is_empty() { means[j] } else { mean(&donors) };
                    (j, v)
                })
                .collect();
            (i, filled)
        })
        .collect();

    let mut fill = DMatrix::zeros(n, d);
    for (i, cells) in rows {
        for (j, v) in cells {
            fill[(i, j)] = v;
        }
    }
    ds.fill(&fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::VariableSpec;

    fn col(vals: &[Option<f64>], spec: VariableSpec) -> Dataset {
        let rows: Vec<Vec<Option<f64>>> = vals.iter().map(|v| vec![*v]).collect();
        Dataset::from_rows(&rows, vec![spec]).unwrap()
    }

    #[test]
    fn mean_fills_gap() {
        let ds = col(&[Some(1.0), None, Some(3.0)], VariableSpec::continuous("a"));
        let out = mean_impute(&ds).unwrap();
        assert_eq!(out.data.values().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(out.imputed_count(), 1);
    }

    #[test]
    fn complete_is_identity() {
        let ds = col(&[Some(1.0), Some(3.0)], VariableSpec::continuous("a"));
        for out in [mean_impute(&ds), median_impute(&ds), knn_impute(&ds, 3)] {
            assert_eq!(out.unwrap().data.values(), ds.values());
        }
    }

    #[test]
    fn median_conventions() {
        let odd = col(&[Some(1.0), Some(2.0), Some(100.0), None], VariableSpec::continuous("a"));
        assert_eq!(median_impute(&odd).unwrap().data.values()[3], 2.0);
        let even = col(&[Some(1.0), Some(2.0), Some(3.0), Some(100.0), None], VariableSpec::continuous("a"));
        assert_eq!(median_impute(&even).unwrap().data.values()[4], 2.5);
        let ord = col(
            &[Some(0.0), Some(1.0), Some(2.0), Some(3.0), None],
            VariableSpec::ordinal("o", ["a", "b", "c", "d"]),
        );
        assert_eq!(median_impute(&ord).unwrap().data.values()[4], 1.0);
    }

    #[test]
    fn knn_hand_example() {
        let ds = Dataset::from_rows(
            &[
                vec![Some(1.0), Some(2.0)],
                vec![Some(1.1), None],
                vec![Some(5.0), Some(10.0)],
            ],
            Dataset::generic_specs(2),
        )
        .unwrap();
        assert_eq!(knn_impute(&ds, 1).unwrap().data.values()[(1, 1)], 2.0);
        assert_eq!(knn_impute(&ds, 2).unwrap().data.values()[(1, 1)], 6.0);
        assert!(knn_impute(&ds, 0).is_err());
    }

    #[test]
    fn knn_duplicate_row_recovered() {
        let ds = Dataset::from_rows(
            &[
                vec![Some(0.3), Some(7.25), Some(-1.0)],
                vec![Some(0.9), Some(1.0), Some(4.0)],
                vec![Some(0.3), None, Some(-1.0)],
            ],
            Dataset::generic_specs(3),
        )
        .unwrap();
        assert_eq!(knn_impute(&ds, 1).unwrap().data.values()[(2, 1)], 7.25);
    }

    #[test]
    fn fully_missing_column_errors() {
        let ds = col(&[None, None], VariableSpec::continuous("a"));
        assert!(mean_impute(&ds).is_err());
        assert!(median_impute(&ds).is_err());
        assert!(knn_impute(&ds, 1).is_err());
    }
}
