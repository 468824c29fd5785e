//! Seeded synthetic data for tests, benchmarks and demos.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, VariableSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Equicorrelated covariance with unit variances.
pub fn equicorrelated(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho })
}

/// `n` draws from `N(mu, sigma)`, one per row.
pub fn mvn_samples(mu: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = mu.len();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("sampling covariance is not positive definite"))?;
    let l = chol.l();
    let mut r = rng::seeded(seed);
    let z = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut r));
    let mut x = (l * z).transpose();
    for mut row in x.row_iter_mut() {
        row += mu.transpose();
    }
    Ok(x)
}

/// Complete all-continuous dataset from an equicorrelated normal.
pub fn correlated_dataset(n: usize, d: usize, rho: f64, seed: u64) -> Result<Dataset> {
    let x = mvn_samples(&DVector::zeros(d), &equicorrelated(d, rho), n, seed)?;
    Dataset::complete(x, Dataset::generic_specs(d))
}

/// Random DAG over `d` nodes in index order: each pair `i < j` gets an edge
/// `i -> j` with probability `edge_prob`, weight uniform in `±[0.5, 2]`.
pub fn random_dag(d: usize, edge_prob: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    let mut w = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            if r.random::<f64>() < edge_prob {
                let mag = r.random_range(0.5..=2.0);
                w[(i, j)] = if r.random::<bool>() { mag } else { -mag };
            }
        }
    }
    w
}

/// Samples the linear SEM `X = X W + E` with standard normal noise, visiting
/// nodes in index order (valid when `w` is strictly upper triangular).
pub fn linear_sem_samples(w: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let d = w.nrows();
    let mut r = rng::seeded(seed);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut r);
            let parents: f64 = (0..j).map(|p| x[(i, p)] * w[(p, j)]).sum();
            x[(i, j)] = parents + noise;
        }
    }
    x
}

pub const GENERAL_HEALTH_LEVELS: [&str; 5] = ["Poor", "Fair", "Good", "Very good", "Excellent"];
pub const AGE_CATEGORY_LEVELS: [&str; 13] = [
    "Age 18 to 24",
    "Age 25 to 29",
    "Age 30 to 34",
    "Age 35 to 39",
    "Age 40 to 44",
    "Age 45 to 49",
    "Age 50 to 54",
    "Age 55 to 59",
    "Age 60 to 64",
    "Age 65 to 69",
    "Age 70 to 74",
    "Age 75 to 79",
    "Age 80 or older",
];
pub const HAD_DIABETES_LEVELS: [&str; 4] = [
    "Yes",
    "Yes, but only during pregnancy (female)",
    "No, pre-diabetes or borderline diabetes",
    "No",
];
pub const SMOKER_STATUS_LEVELS: [&str; 4] = [
    "Never smoked",
    "Former smoker",
    "Current smoker - now smokes some days",
    "Current smoker - now smokes every day",
];

/// Variable specs of the health-survey-like demo table.
pub fn cdc_like_specs() -> Vec<VariableSpec> {
    vec![
        VariableSpec::continuous("BMI"),
        VariableSpec::ordinal("GeneralHealth", GENERAL_HEALTH_LEVELS),
        VariableSpec::ordinal("AgeCategory", AGE_CATEGORY_LEVELS),
        VariableSpec::ordinal("HadDiabetes", HAD_DIABETES_LEVELS),
        VariableSpec::ordinal("SmokerStatus", SMOKER_STATUS_LEVELS),
        VariableSpec::continuous("SleepHours"),
    ]
}

fn bucket(z: f64, cuts: &[f64]) -> f64 {
    cuts.iter().filter(|&&c| z > c).count() as f64
}

/// Complete mixed-type table shaped like a health survey extract: ordinal
/// variables are discretized correlated latent normals, BMI depends
/// negatively on general health.
pub fn cdc_like(n: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::seeded(seed);
    let mut x = DMatrix::zeros(n, 6);
    for i in 0..n {
        let mut z = || -> f64 { StandardNormal.sample(&mut r) };
        let age = z();
        let smoke = 0.2 * age + z();
        let health = -0.35 * age - 0.25 * smoke + 0.9 * z();
        let diabetes = 0.45 * health - 0.3 * age + 0.85 * z();
        let sleep = 7.0 + 0.3 * health + 1.2 * z();
        let age_cat = bucket(age, &[-1.6, -1.15, -0.8, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.3, 1.7]);
        let health_cat = bucket(health, &[-1.4, -0.6, 0.3, 1.1]);
        let diabetes_cat = bucket(diabetes, &[-1.1, -1.0, -0.6]);
        let smoke_cat = bucket(smoke, &[0.3, 1.0, 1.4]);
        let bmi = 28.5 - 1.3 * health_cat - 0.1 * age_cat - 1.1 * diabetes_cat + 0.25 * smoke_cat
            - 0.2 * (sleep - 7.0)
            + 3.0 * z();
        x[(i, 0)] = (bmi * 100.0).round() / 100.0;
        x[(i, 1)] = health_cat;
        x[(i, 2)] = age_cat;
        x[(i, 3)] = diabetes_cat;
        x[(i, 4)] = smoke_cat;
        x[(i, 5)] = sleep.round().clamp(1.0, 24.0);
    }
    Dataset::complete(x, cdc_like_specs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dag_is_strictly_upper_triangular() {
        let w = random_dag(6, 0.5, 3);
        for i in 0..6 {
            for j in 0..=i {
                assert_eq!(w[(i, j)], 0.0);
            }
        }
        assert!(w.iter().all(|&v| v == 0.0 || (0.5..=2.0).contains(&v.abs())));
    }

    #[test]
    fn mvn_moments_close() {
        let x = mvn_samples(&DVector::from_vec(vec![1.0, -1.0]), &equicorrelated(2, 0.5), 20_000, 1).unwrap();
        let m = x.row_mean();
        assert!((m[0] - 1.0).abs() < 0.05 && (m[1] + 1.0).abs() < 0.05);
    }

    #[test]
    fn cdc_like_levels_valid() {
        let ds = cdc_like(500, 2).unwrap();
        for (j, s) in ds.specs().iter().enumerate() {
            if s.is_ordinal() {
                assert!(ds.observed_column(j).iter().all(|&v| v >= 0.0 && (v as usize) < s.levels.len()));
            }
        }
    }
}
