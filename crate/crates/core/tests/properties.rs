mod common;

use proptest::prelude::*;
use rhvae::autodiff::Tensor;
use rhvae::cluster::f1_score;
use rhvae::data::{batches, split_indices, SplitSpec};
use rhvae::eval::log_sum_exp;
use rhvae::flow::temperature_schedule;
use rhvae::geometry::curve_length_value;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_indices(
        labels in prop::collection::vec(0usize..3, 6..80),
        frac in 0.2f64..0.9,
        seed in any::<u64>(),
        balanced in any::<bool>(),
    ) {
        let spec = SplitSpec { train_fraction: frac, seed, balanced };
        let groups_ok = !balanced || (0..3).all(|c| {
            let n = labels.iter().filter(|&&l| l == c).count();
            n == 0 || n >= 2
        });
        prop_assume!(groups_ok);
        let s = split_indices(&labels, &spec).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert!(!s.train.is_empty() && !s.test.is_empty());
        prop_assert_eq!(s, split_indices(&labels, &spec).unwrap());
    }

    #[test]
    fn batches_are_a_permutation(n in 1usize..200, b in 1usize..64, seed in any::<u64>(), epoch in 0u64..100) {
        let parts = batches(n, b, seed, epoch);
        prop_assert!(parts.iter().all(|p| !p.is_empty() && p.len() <= b));
        let mut all = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn inverse_metric_dominates_lambda(
        seed in 0u64..1000,
        z in prop::collection::vec(-4.0f64..4.0, 2),
        lambda in 1e-4f64..1.0,
    ) {
        let field = common::random_field(2, 3, seed, 0.8, lambda);
        let g = field.inverse_metric_at(&z);
        let ev = rhvae::autodiff::linalg::symmetric_eigenvalues(&g, 2);
        prop_assert!(ev[0] >= lambda * (1.0 - 1e-10));
    }

    #[test]
    fn f1_ignores_cluster_names(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let (a, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let renamed: Vec<usize> = a.iter().map(|&c| perm[c]).collect();
        let x = f1_score(&a, &labels).unwrap();
        let y = f1_score(&renamed, &labels).unwrap();
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&x));
    }

    #[test]
    fn log_sum_exp_shifts(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(log_sum_exp(&v) >= max && log_sum_exp(&v) <= max + (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn tempering_factors_telescope(b0 in 0.05f64..1.0, k in 1usize..30) {
        let s = temperature_schedule(b0, k);
        prop_assert_eq!(s.sqrt_beta[k], 1.0);
        prop_assert_eq!(s.sqrt_beta[0], b0);
        let prod: f64 = s.alpha.iter().product();
        prop_assert!((prod - b0).abs() < 1e-12);
        prop_assert!(s.sqrt_beta.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn refining_a_polyline_keeps_flat_length(
        pts in prop::collection::vec(-2.0f64..2.0, 4..20),
        lambda in 1e-3f64..1.0,
    ) {
        let pts = &pts[..pts.len() / 2 * 2];
        let m = pts.len() / 2;
        let mut fine = Vec::new();
        for i in 0..m - 1 {
            let (a, b) = (&pts[2 * i..2 * i + 2], &pts[2 * i + 2..2 * i + 4]);
            fine.extend_from_slice(a);
            fine.extend([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
        }
        fine.extend_from_slice(&pts[pts.len() - 2..]);
        let field = rhvae::metric::MetricField::flat(2, lambda);
        let coarse = curve_length_value(&field, &Tensor::new([m, 2], pts.to_vec()).unwrap()).unwrap();
        let refined = curve_length_value(&field, &Tensor::new([2 * m - 1, 2], fine).unwrap()).unwrap();
        prop_assert!((coarse - refined).abs() <= 1e-9 * coarse.max(1.0));
    }
}
