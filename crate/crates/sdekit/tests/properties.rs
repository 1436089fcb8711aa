//! Randomized invariants: statements that must hold for every input, not
//! just the seeded examples the unit tests pin down.

use nalgebra::DMatrix;
use proptest::collection::btree_set;
use proptest::prelude::*;
use sdekit::basis::{polynomial_library, ModelBasis};
use sdekit::estimators::{diffusion_simple, gram, log_likelihood};
use sdekit::selection::{
    accuracy, greedy_search, max_gain_cdf, predicted_error_rate, score, AccuracyReport, Criterion,
};
use sdekit::sde::{simulate, BurnIn, DriftSpec, NoiseSpec};
use sdekit::trajectory::Trajectory;

fn model_strategy(n: usize) -> impl Strategy<Value = ModelBasis> {
    btree_set(0..n, 0..=n).prop_map(|s| ModelBasis::new(s.into_iter().collect()).unwrap())
}

fn ou1(n: usize, seed: u64) -> Trajectory<f64> {
    let drift = DriftSpec::Ou {
        a: DMatrix::from_element(1, 1, 1.0),
    };
    let noise = NoiseSpec::AdditiveScalar { d: 1.0 };
    simulate(&drift, &noise, &[0.0], 0.01, n, seed, BurnIn::Default)
        .unwrap()
        .trajectory
}

proptest! {
    #[test]
    fn toggling_twice_is_identity(m in model_strategy(32), idx in 0usize..32) {
        let once = m.toggled(idx);
        prop_assert_eq!(once.contains(idx), !m.contains(idx));
        prop_assert_eq!(once.toggled(idx), m);
    }

    #[test]
    fn accuracy_rates_partition_the_union(a in model_strategy(16), b in model_strategy(16)) {
        let r: AccuracyReport<f64> = accuracy(&a, &b);
        prop_assert_eq!(r.exact_match, a == b);
        for rate in [r.true_positive, r.false_positive, r.false_negative] {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        let total = r.true_positive + r.false_positive + r.false_negative;
        if a.union_size(&b) > 0 {
            prop_assert!((total - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(total, 0.0);
        }
    }

    #[test]
    fn max_gain_cdf_is_a_cdf(z in 0.0..30.0f64, dz in 0.0..5.0f64, n in 1usize..200) {
        let at_z = max_gain_cdf(z, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&at_z));
        prop_assert!(max_gain_cdf(z + dz, n).unwrap() >= at_z);
        // More candidates push the maximum up, never down.
        prop_assert!(max_gain_cdf(z, n + 1).unwrap() <= at_z);
    }

    #[test]
    fn predicted_error_rate_stays_in_unit_interval(
        p in 1e-9..0.99f64,
        n0 in 1usize..200,
        frac in 0.0..1.0f64,
    ) {
        let n_star = ((n0 - 1) as f64 * frac) as usize;
        let g = predicted_error_rate(p, n0, n_star).unwrap();
        prop_assert!(g > 0.0 && g < 1.0);
        prop_assert!(predicted_error_rate(p / 2.0, n0, n_star).unwrap() <= g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn simulation_is_seed_deterministic(seed in any::<u64>(), n in 10usize..50) {
        let a = ou1(n, seed);
        let b = ou1(n, seed);
        prop_assert_eq!(a.len(), n + 1);
        for k in 0..a.len() {
            prop_assert_eq!(a.row(k), b.row(k));
            prop_assert!(a.row(k)[0].is_finite());
        }
    }

    #[test]
    fn identity_weight_gram_is_symmetric_psd(
        data in proptest::collection::vec(-2.0..2.0f64, 10..60),
        probe in proptest::collection::vec(-1.0..1.0f64, 3),
    ) {
        let traj = Trajectory::from_flat(data, 1, 0.1).unwrap();
        let lib = polynomial_library(1, 2).unwrap();
        let model = ModelBasis::new(vec![0, 1, 2]).unwrap();
        let g = gram(&traj, &lib, &model, &DMatrix::identity(1, 1)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(g[(i, j)], g[(j, i)]);
            }
        }
        let x = nalgebra::DVector::from_vec(probe);
        let quad = (x.transpose() * &g * &x)[(0, 0)];
        prop_assert!(quad >= -1e-12, "Gram must be positive semidefinite, got {}", quad);
    }

    #[test]
    fn log_likelihood_never_positive(seed in any::<u64>(), scale in -3.0..3.0f64) {
        let traj = ou1(60, seed);
        let est = diffusion_simple(&traj).unwrap();
        let mut drift = DMatrix::zeros(traj.len() - 1, 1);
        for k in 0..drift.nrows() {
            drift[(k, 0)] = scale * traj.row(k)[0];
        }
        let ll = log_likelihood(&traj, &drift, &est).unwrap();
        prop_assert!(ll <= 1e-12, "quasi log-likelihood must be <= 0, got {}", ll);
    }

    #[test]
    fn penalty_ordering_for_any_valid_p(p in 1e-6..0.99f64) {
        // tau = 20 > e^2, so BIC is stricter than AIC; any p in (0,1) with
        // a 3-function library gives ln(n0/p) > 1, so PASTIS is stricter too.
        let xs: Vec<f64> = (0..201).map(|k| (k as f64 * 0.05).sin()).collect();
        let traj = Trajectory::from_flat(xs, 1, 0.1).unwrap();
        let lib = polynomial_library(1, 2).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let aic = score(&Criterion::Aic, &traj, &lib, &model).unwrap();
        let bic = score(&Criterion::Bic, &traj, &lib, &model).unwrap();
        let pastis = score(&Criterion::Pastis { p }, &traj, &lib, &model).unwrap();
        prop_assert!(bic < aic);
        prop_assert!(pastis < aic);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn greedy_search_is_reproducible(data_seed in any::<u64>(), search_seed in any::<u64>()) {
        let traj = ou1(500, data_seed);
        let lib = polynomial_library(1, 2).unwrap();
        let criterion = Criterion::Pastis { p: 0.001 };
        let a = greedy_search(&traj, &lib, &criterion, search_seed).unwrap();
        let b = greedy_search(&traj, &lib, &criterion, search_seed).unwrap();
        prop_assert_eq!(a.chosen, b.chosen);
        prop_assert_eq!(a.score, b.score);
        prop_assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn csv_round_trip_preserves_random_data(
        rows in proptest::collection::vec(proptest::collection::vec(-1e6..1e6f64, 3), 2..20),
        dt in 1e-4..10.0f64,
    ) {
        let traj = Trajectory::from_rows(&rows, dt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        traj.write_csv(&path).unwrap();
        let back: Trajectory<f64> = Trajectory::read_csv(&path).unwrap();
        prop_assert_eq!(back.len(), traj.len());
        prop_assert_eq!(back.dim(), traj.dim());
        for k in 0..traj.len() {
            prop_assert_eq!(back.row(k), traj.row(k));
        }
        prop_assert!((back.dt() - traj.dt()).abs() <= f64::EPSILON * dt);
    }
}
