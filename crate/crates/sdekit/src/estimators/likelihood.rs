use nalgebra::DMatrix;

use super::cache::{BuildOpts, FitCache};
use super::diffusion::DiffusionEstimate;
use crate::basis::{BasisLibrary, ModelBasis};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::trajectory::Trajectory;

/// Quasi log-likelihood of explicit per-row drift predictions:
/// -tau <(Dx/dt - f)^T (4 Dbar)^-1 (Dx/dt - f)> with tau = (N-1) dt.
///
/// `drift_values` holds one row per increment (N-1 rows). The constant
/// normalization of the underlying Gaussian density is dropped, so a
/// pointwise-perfect prediction scores exactly zero and everything else
/// scores negative.
pub fn log_likelihood<T: Scalar>(
    traj: &Trajectory<T>,
    drift_values: &DMatrix<T>,
    diffusion: &DiffusionEstimate<T>,
) -> Result<T> {
    if traj.len() < 2 {
        return Err(Error::InsufficientData {
            what: "likelihood evaluation",
            needed: 2,
            got: traj.len(),
        });
    }
    let n_rows = traj.len() - 1;
    let d = traj.dim();
    if drift_values.nrows() != n_rows || drift_values.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "drift prediction rows",
            expected: n_rows * d,
            got: drift_values.nrows() * drift_values.ncols(),
        });
    }
    let weight = diffusion.weight()?;
    let dt = traj.dt();
    let mut r = vec![T::zero(); d];
    let mut wr = vec![T::zero(); d];
    let mut acc = T::zero();
    for k in 0..n_rows {
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            r[a] = (xn[a] - x[a]) / dt - drift_values[(k, a)];
        }
        weight.mul_into(&r, &mut wr);
        for a in 0..d {
            acc += r[a] * wr[a];
        }
    }
    let tau = T::from_usize(n_rows).unwrap() * dt;
    Ok(-tau * acc / T::from_usize(n_rows).unwrap())
}

/// Coarse-sampling-robust log-likelihood of a fitted model: midpoint
/// residuals under the drift-debiased diffusion weight, plus the
/// gradient correction that keeps the score unbiased at finite dt.
pub fn log_likelihood_dt<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    alpha: &[T],
) -> Result<T> {
    let cache = FitCache::build_trapeze(traj, library, Some(model), BuildOpts::default())?;
    cache.evaluate(model, alpha)
}

/// Measurement-noise-robust log-likelihood: residuals against lagged basis
/// evaluations under the noise-corrected diffusion weight.
pub fn log_likelihood_shift<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    alpha: &[T],
) -> Result<T> {
    let cache = FitCache::build_shift(traj, library, Some(model), BuildOpts::default())?;
    cache.evaluate(model, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::polynomial_library;
    use crate::estimators::diffusion::{diffusion_simple, diffusion_three_point};
    use crate::estimators::fit::{fit_aml, fit_trapeze};
    use crate::sde::{simulate, BurnIn, DriftSpec, NoiseSpec};
    use nalgebra::dmatrix;

    fn ou1(n: usize, seed: u64) -> Trajectory<f64> {
        simulate(
            &DriftSpec::Ou { a: dmatrix![1.0] },
            &NoiseSpec::AdditiveScalar { d: 1.0 },
            &[0.0],
            0.01,
            n,
            seed,
            BurnIn::Default,
        )
        .unwrap()
        .trajectory
    }

    #[test]
    fn perfect_pointwise_prediction_scores_zero() {
        let traj = ou1(2_000, 31);
        let d = diffusion_simple(&traj).unwrap();
        let incr = traj.increments();
        let fhat = incr / 0.01;
        let ll = log_likelihood(&traj, &fhat, &d).unwrap();
        assert!(
            ll.abs() < 1e-9,
            "exact prediction should score zero, got {ll}"
        );
        // Any other prediction scores strictly below.
        let worse = DMatrix::zeros(traj.len() - 1, 1);
        assert!(log_likelihood(&traj, &worse, &d).unwrap() < ll);
    }

    #[test]
    fn fitted_drift_beats_zero_drift() {
        let traj = ou1(10_000, 8);
        let lib = polynomial_library(1, 1).unwrap();
        let est = diffusion_simple(&traj).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let fit = fit_aml(&traj, &lib, &model, &est).unwrap();
        let n_rows = traj.len() - 1;
        let mut fhat = DMatrix::zeros(n_rows, 1);
        for k in 0..n_rows {
            fhat[(k, 0)] = fit.coefficients[0] * traj.row(k)[0];
        }
        let ll_fit = log_likelihood(&traj, &fhat, &est).unwrap();
        let ll_null = log_likelihood(&traj, &DMatrix::zeros(n_rows, 1), &est).unwrap();
        assert!(ll_fit > ll_null);
        // And the explicit evaluation agrees with the cached fit score.
        assert!((ll_fit - fit.log_likelihood).abs() < 1e-6 * ll_fit.abs().max(1.0));
    }

    #[test]
    fn superfluous_gain_has_half_chi_square_mean() {
        // Adding one useless function to the true model should lift the
        // fitted likelihood by chi^2_1/2 on average, i.e. 0.5.
        let lib = polynomial_library(1, 2).unwrap();
        let true_model = ModelBasis::new(vec![1]).unwrap();
        let bigger = ModelBasis::new(vec![1, 2]).unwrap();
        let mut mean = 0.0;
        let runs = 200;
        for seed in 0..runs {
            let traj = ou1(10_000, 1000 + seed);
            let cache = FitCache::aml(&traj, &lib).unwrap();
            let gain = cache.score(&bigger).unwrap().log_likelihood
                - cache.score(&true_model).unwrap().log_likelihood;
            assert!(gain >= -1e-9, "nested gain cannot be negative: {gain}");
            mean += gain;
        }
        mean /= runs as f64;
        assert!(
            (mean - 0.5).abs() < 0.15,
            "superfluous mean gain {mean}, expected about 0.5"
        );
    }

    #[test]
    fn dt_correction_vanishes_for_gradient_free_model() {
        // A constant basis function has zero gradient, so the corrected
        // score must coincide with the plain quadratic under the same
        // weight for every coefficient value. A gradient-carrying model
        // on the same data must not.
        let traj = ou1(3_000, 12);
        let lib = polynomial_library(1, 1).unwrap();
        let est = diffusion_three_point(&traj).unwrap();
        let opts = || BuildOpts {
            weight: Some((est.weight().unwrap(), est.clone())),
            ..BuildOpts::default()
        };
        let corrected = FitCache::build_trapeze(&traj, &lib, None, opts()).unwrap();
        let plain = FitCache::build_aml(&traj, &lib, None, opts()).unwrap();
        let const_model = ModelBasis::new(vec![0]).unwrap();
        let linear_model = ModelBasis::new(vec![1]).unwrap();
        for a in [-1.3, 0.5, 2.0] {
            let with_corr = corrected.evaluate(&const_model, &[a]).unwrap();
            let without = plain.evaluate(&const_model, &[a]).unwrap();
            assert!(
                (with_corr - without).abs() < 1e-9 * without.abs().max(1.0),
                "constant basis: {with_corr} vs {without}"
            );
            let lin_corr = corrected.evaluate(&linear_model, &[a]).unwrap();
            let lin_plain = plain.evaluate(&linear_model, &[a]).unwrap();
            assert!((lin_corr - lin_plain).abs() > 1e-6);
        }
        // The score at the fitted optimum matches the fit's own number.
        let fit = fit_trapeze(&traj, &lib, &linear_model, &est).unwrap();
        let ll = log_likelihood_dt(&traj, &lib, &linear_model, &fit.coefficients).unwrap();
        assert!((ll - fit.log_likelihood).abs() < 1e-7 * ll.abs().max(1.0));
    }

    #[test]
    fn dt_likelihood_approaches_plain_likelihood_at_fine_sampling() {
        // On the same underlying path, |l_dt - l| relative to |l| should
        // drop by at least 5x when the sampling stride shrinks 10x.
        let fine = ou1(200_000, 44);
        let rel_gap = |traj: &Trajectory<f64>| {
            let lib = polynomial_library(1, 1).unwrap();
            let model = ModelBasis::new(vec![1]).unwrap();
            let cache = FitCache::aml(traj, &lib).unwrap();
            let fit = cache.score(&model).unwrap();
            let l_dt =
                log_likelihood_dt(traj, &lib, &model, &fit.coefficients).unwrap();
            (l_dt - fit.log_likelihood).abs() / fit.log_likelihood.abs().max(1.0)
        };
        let coarse = fine.subsample(10).unwrap();
        let g_fine = rel_gap(&fine);
        let g_coarse = rel_gap(&coarse);
        assert!(
            g_coarse >= 5.0 * g_fine,
            "expected at least 5x shrink: coarse {g_coarse} fine {g_fine}"
        );
    }

    #[test]
    fn shift_likelihood_is_maximized_by_the_shift_fit() {
        let traj = ou1(20_000, 50).add_measurement_noise(0.2, 9).unwrap();
        let lib = polynomial_library(1, 1).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let cache = FitCache::shift(&traj, &lib).unwrap();
        let fit = cache.score(&model).unwrap();
        let at = |a: f64| log_likelihood_shift(&traj, &lib, &model, &[a]).unwrap();
        let best = at(fit.coefficients[0]);
        assert!(at(fit.coefficients[0] + 0.3) < best);
        assert!(at(fit.coefficients[0] - 0.3) < best);
        assert!((best - fit.log_likelihood).abs() < 1e-7 * best.abs().max(1.0));
    }
}
