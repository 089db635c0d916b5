mod common;

use common::{brute_force_covariance, equicorrelated, max_abs_diff, naive_matmul, near_identity, randn, rng};
use dbp_core::decorr::{
    decorrelate, decorrelation_loss, fuse_weights, off_diagonal_covariance, subsample_rows, update_decorrelation,
    CorrelationEstimate, DecorrelationMatrix,
};
use dbp_core::nn::gelu;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_matches_double_sum(n in 1usize..64, d in 1usize..20, seed in any::<u64>()) {
        let z = randn(n, d, &mut rng(seed));
        let c = off_diagonal_covariance(z.view()).unwrap();
        prop_assert!(max_abs_diff(c.off_diag().view(), brute_force_covariance(z.view()).view()) <= 1e-10);
        prop_assert_eq!(c.sample_count(), n);
    }

    #[test]
    fn covariance_is_symmetric_with_zero_diagonal(n in 1usize..64, d in 1usize..20, seed in any::<u64>()) {
        let z = randn(n, d, &mut rng(seed)) * 3.0;
        let c = off_diagonal_covariance(z.view()).unwrap();
        let m = c.off_diag();
        for i in 0..d {
            prop_assert_eq!(m[[i, i]], 0.0);
            for j in 0..d {
                prop_assert!((m[[i, j]] - m[[j, i]]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn update_matches_closed_form(d in 1usize..16, eta in 1e-4f64..0.1, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rm = DecorrelationMatrix::from_values("s", near_identity(d, 0.3, &mut r)).unwrap();
        let c = CorrelationEstimate::from_matrix(randn(d, d, &mut r), 8).unwrap();
        let next = update_decorrelation(&rm, &c, eta, 0).unwrap();
        let expected = rm.values() - &(naive_matmul(c.off_diag().view(), rm.values().view()) * eta);
        prop_assert!(max_abs_diff(next.values().view(), expected.view()) <= 1e-12);
    }

    #[test]
    fn zero_correlation_is_an_exact_fixed_point(d in 1usize..16, eta in 0.0f64..1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let rm = DecorrelationMatrix::from_values("s", randn(d, d, &mut r)).unwrap();
        let c = CorrelationEstimate::from_matrix(Array2::zeros((d, d)), 1).unwrap();
        let next = update_decorrelation(&rm, &c, eta, 0).unwrap();
        prop_assert_eq!(next.values(), rm.values());
    }

    #[test]
    fn full_fraction_subsample_gives_full_batch_covariance(n in 1usize..80, d in 1usize..12, seed in any::<u64>()) {
        let z = randn(n, d, &mut rng(seed));
        let sub = subsample_rows(z.view(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(
            off_diagonal_covariance(sub.view()).unwrap(),
            off_diagonal_covariance(z.view()).unwrap()
        );
    }

    #[test]
    fn fused_weights_are_associative(
        n in 1usize..16, i in 1usize..16, o in 1usize..16, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let w = randn(o, i, &mut r);
        let rm = DecorrelationMatrix::from_values("s", near_identity(i, 0.5, &mut r)).unwrap();
        let x = randn(n, i, &mut r);
        let fused = x.dot(&fuse_weights(w.view(), &rm).unwrap().t()).mapv(gelu);
        let chained = decorrelate(&rm, x.view()).unwrap().dot(&w.t()).mapv(gelu);
        prop_assert!(max_abs_diff(fused.view(), chained.view()) <= 1e-5);
    }
}

#[test]
fn loop_removes_most_correlation() {
    for seed in 0..10 {
        let x = equicorrelated(1024, 8, 0.5, seed);
        let mut rm = DecorrelationMatrix::identity("s", 8);
        let initial = decorrelation_loss(&off_diagonal_covariance(x.view()).unwrap()).unwrap();
        let mut last = initial;
        for it in 0..500 {
            let z = decorrelate(&rm, x.view()).unwrap();
            let c = off_diagonal_covariance(z.view()).unwrap();
            last = decorrelation_loss(&c).unwrap();
            rm.apply_update(&c, 1e-2, it).unwrap();
        }
        let z = decorrelate(&rm, x.view()).unwrap();
        last = last.min(decorrelation_loss(&off_diagonal_covariance(z.view()).unwrap()).unwrap());
        assert!(last <= 0.05 * initial, "seed {seed}: {initial} -> {last}");
    }
}

#[test]
fn sample_correlation_of_equicorrelated_draws() {
    let x = equicorrelated(20_000, 4, 0.5, 1);
    let c = off_diagonal_covariance(x.view()).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!((c.off_diag()[[i, j]] - 0.5).abs() < 0.03);
            }
        }
    }
}
