use nalgebra::DMatrix;
use proptest::prelude::*;
use sesa_core::attention::{attention_forward, refine, softmax_rows, AttentionParams};
use sesa_core::baselines::{knn_impute, mean_impute, median_impute};
use sesa_core::dataset::{denormalize, normalize, snap_ordinal, Dataset, VariableSpec};
use sesa_core::metrics::{effect_size, wasserstein_1d, wilcoxon_signed_rank, EffectSize};
use sesa_core::missingness::{apply_mcar, MaskPlan};

fn matrix(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| DMatrix::from_vec(n, d, v))
}

fn with_gaps() -> impl Strategy<Value = Dataset> {
    (3usize..12, 1usize..4).prop_flat_map(|(n, d)| {
        (matrix(n, d), prop::collection::vec(any::<bool>(), n * d)).prop_map(move |(x, keep)| {
            let mut mask = DMatrix::from_vec(n, d, keep);
            // Keep the first row observed so no column is empty.
            for j in 0..d {
                mask[(0, j)] = true;
            }
            Dataset::new(x, mask, Dataset::generic_specs(d)).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_round_trips(ds in with_gaps()) {
        let back = denormalize(&normalize(&ds).unwrap()).unwrap();
        for i in 0..ds.n_rows() {
            for j in 0..ds.n_cols() {
                prop_assert_eq!(back.is_observed(i, j), ds.is_observed(i, j));
                if ds.is_observed(i, j) {
                    prop_assert!((back.values()[(i, j)] - ds.values()[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalized_cells_in_unit_interval(ds in with_gaps()) {
        let z = normalize(&ds).unwrap();
        for i in 0..ds.n_rows() {
            for j in 0..ds.n_cols() {
                if z.is_observed(i, j) {
                    let v = z.values()[(i, j)];
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn mcar_masks_exact_count(x in matrix(20, 3), rate in 0.0f64..0.95, seed in any::<u64>()) {
        let ds = Dataset::complete(x, Dataset::generic_specs(3)).unwrap();
        let m = apply_mcar(&ds, &MaskPlan::new(rate, seed)).unwrap();
        prop_assert_eq!(m.masked.n_missing(), (rate * 60.0).round() as usize);
        prop_assert_eq!(&m.truth, &ds);
        let again = apply_mcar(&ds, &MaskPlan::new(rate, seed)).unwrap();
        prop_assert_eq!(m.masked, again.masked);
    }

    #[test]
    fn baselines_keep_observed_cells(ds in with_gaps(), k in 1usize..5) {
        for out in [mean_impute(&ds).unwrap(), median_impute(&ds).unwrap(), knn_impute(&ds, k).unwrap()] {
            prop_assert!(out.data.is_complete());
            for i in 0..ds.n_rows() {
                for j in 0..ds.n_cols() {
                    prop_assert_eq!(out.provenance[(i, j)], !ds.is_observed(i, j));
                    if ds.is_observed(i, j) {
                        prop_assert_eq!(out.data.values()[(i, j)].to_bits(), ds.values()[(i, j)].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn mean_and_median_permutation_invariant(ds in with_gaps(), shift in 1usize..11) {
        let n = ds.n_rows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let x = DMatrix::from_fn(n, ds.n_cols(), |i, j| ds.values()[(perm[i], j)]);
        let mask = DMatrix::from_fn(n, ds.n_cols(), |i, j| ds.mask()[(perm[i], j)]);
        let p = Dataset::new(x, mask, ds.specs().to_vec()).unwrap();
        for (a, b) in [(mean_impute(&ds).unwrap(), mean_impute(&p).unwrap()), (median_impute(&ds).unwrap(), median_impute(&p).unwrap())] {
            for i in 0..n {
                for j in 0..ds.n_cols() {
                    prop_assert_eq!(a.data.values()[(perm[i], j)].to_bits(), b.data.values()[(i, j)].to_bits());
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_stochastic(m in matrix(5, 7)) {
        let s = softmax_rows(&(m * 100.0));
        for r in s.row_iter() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_and_convex(x in matrix(8, 3), seed in any::<u64>(), shift in 1usize..8) {
        let p = AttentionParams::init(3, 2, seed).unwrap();
        let a = attention_forward(&x, &p).unwrap();
        let perm: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
        let xp = DMatrix::from_fn(8, 3, |i, j| x[(perm[i], j)]);
        let b = attention_forward(&xp, &p).unwrap();
        for i in 0..8 {
            for j in 0..3 {
                prop_assert!((a.output[(perm[i], j)] - b.output[(i, j)]).abs() < 1e-12);
            }
        }
        let v = &x * &p.wv;
        for j in 0..3 {
            let lo = v.column(j).min();
            let hi = v.column(j).max();
            for i in 0..8 {
                prop_assert!(a.output[(i, j)] >= lo - 1e-12 && a.output[(i, j)] <= hi + 1e-12);
            }
        }
        for r in a.weights.row_iter() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_never_touches_observed(x in matrix(6, 2), keep in prop::collection::vec(any::<bool>(), 12), seed in any::<u64>()) {
        let ds = Dataset::complete(x, Dataset::generic_specs(2)).unwrap();
        let prov = DMatrix::from_vec(6, 2, keep).map(|k| !k);
        let p = AttentionParams::init(2, 2, seed).unwrap();
        let out = refine(&ds, &p, &prov).unwrap();
        for i in 0..6 {
            for j in 0..2 {
                if !prov[(i, j)] {
                    prop_assert_eq!(out.values()[(i, j)].to_bits(), ds.values()[(i, j)].to_bits());
                }
            }
        }
    }

    #[test]
    fn snapped_ordinals_are_levels(vals in prop::collection::vec(-3.0f64..8.0, 1..20)) {
        let n = vals.len();
        let ds = Dataset::complete(DMatrix::from_vec(n, 1, vals), vec![VariableSpec::ordinal("o", ["a", "b", "c", "d"])]).unwrap();
        let s = snap_ordinal(&ds);
        for &v in s.values().iter() {
            prop_assert!(v.fract() == 0.0 && (0.0..=3.0).contains(&v));
        }
    }

    #[test]
    fn wasserstein_is_a_metric(a in prop::collection::vec(-10.0f64..10.0, 1..15),
                               b in prop::collection::vec(-10.0f64..10.0, 1..15),
                               c in prop::collection::vec(-10.0f64..10.0, 1..15)) {
        let ab = wasserstein_1d(&a, &b).unwrap();
        prop_assert_eq!(ab, wasserstein_1d(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        let ac = wasserstein_1d(&a, &c).unwrap();
        let cb = wasserstein_1d(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn wasserstein_shift(a in prop::collection::vec(-10.0f64..10.0, 1..15), c in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein_1d(&a, &b).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn effect_size_is_statistic_over_root_n(p in prop::collection::vec(-5.0f64..5.0, 1..40), n in 1usize..5000) {
        let t = vec![0.0; p.len()];
        let r = wilcoxon_signed_rank(&p, &t, n, EffectSize::StatisticOverRootN).unwrap();
        prop_assert_eq!(r.effect_size, effect_size(r.statistic, n));
        prop_assert!((0.0..=1.0).contains(&r.p_value));
    }
}
