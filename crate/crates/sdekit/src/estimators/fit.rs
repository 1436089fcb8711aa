use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cache::{BuildOpts, FitCache};
use super::diffusion::{diffusion_vestergaard, DiffusionEstimate};
use super::linalg::{Factorized, MatKind};
use crate::basis::{monomial_partial, BasisFunction, BasisLibrary, ModelBasis};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Aml,
    Trapeze,
    Shift,
    Stratonovich,
}

/// A fitted drift model: which functions, their coefficients, and the
/// quantities needed to judge the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FitResult<T: Scalar> {
    pub model: ModelBasis,
    /// One coefficient per model index, in model order.
    pub coefficients: Vec<T>,
    /// The estimator family's own quasi log-likelihood at the fit.
    pub log_likelihood: T,
    /// Observation time behind the fit, n_rows * dt.
    pub tau: T,
    /// Symmetrized regression Gram of the fitted sub-model.
    pub gram: DMatrix<T>,
    pub diffusion: DiffusionEstimate<T>,
    pub estimator: EstimatorKind,
}

/// Left-endpoint weighted regression of increments on the model functions.
pub fn fit_aml<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    diffusion: &DiffusionEstimate<T>,
) -> Result<FitResult<T>> {
    let cache = FitCache::build_aml(traj, library, Some(model), with_weight(diffusion)?)?;
    finish(&cache, model, EstimatorKind::Aml)
}

/// Regression against interval-midpoint basis averages; left endpoints act
/// as instruments, which removes the leading sampling-interval bias.
pub fn fit_trapeze<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    diffusion: &DiffusionEstimate<T>,
) -> Result<FitResult<T>> {
    let cache = FitCache::build_trapeze(traj, library, Some(model), with_weight(diffusion)?)?;
    finish(&cache, model, EstimatorKind::Trapeze)
}

/// Regression with basis functions evaluated one observation in the past,
/// so measurement noise in the increment never correlates with them.
pub fn fit_shift<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    diffusion: &DiffusionEstimate<T>,
) -> Result<FitResult<T>> {
    let cache = FitCache::build_shift(traj, library, Some(model), with_weight(diffusion)?)?;
    finish(&cache, model, EstimatorKind::Shift)
}

/// Midpoint-averaged regression plus the explicit correction that converts
/// the midpoint (Stratonovich) drift back to the Ito drift. The correction
/// uses the instantaneous noise-robust diffusion values and the analytic
/// basis gradients at the observed positions. Grid libraries are not
/// supported: their basis gradients couple every cell.
pub fn fit_stratonovich<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
) -> Result<FitResult<T>> {
    let d = library.state_dim().ok_or_else(|| Error::Unsupported {
        reason: "endpoint-averaged estimator is not defined on grid data".into(),
    })?;
    if traj.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "trajectory dimension for library",
            expected: d,
            got: traj.dim(),
        });
    }
    if traj.len() < 3 {
        return Err(Error::InsufficientData {
            what: "midpoint-averaged fit",
            needed: 3,
            got: traj.len(),
        });
    }
    let est = diffusion_vestergaard(traj)?;
    let weight = est.weight()?;
    let dt = traj.dt();
    let nb = model.len();
    let idxs = model.indices();

    let mut g = DMatrix::<T>::zeros(nb, nb);
    let mut y = DVector::<T>::zeros(nb);
    let mut corr = DVector::<T>::zeros(nb);
    let mut vals0 = vec![T::zero(); nb];
    let mut vals1 = vec![T::zero(); nb];
    let mut comps = vec![0usize; nb];
    let mut v = vec![T::zero(); d];
    let mut wv = vec![T::zero(); d];
    let mut dy0 = vec![T::zero(); d];
    let mut dy1 = vec![T::zero(); d];
    let mut wdy0 = vec![T::zero(); d];
    let mut wdy1 = vec![T::zero(); d];
    let rows = traj.len() - 2;
    let (two, half) = (T::of(2.0), T::of(0.5));
    for k in 0..rows {
        let (x, xn, xnn) = (traj.row(k), traj.row(k + 1), traj.row(k + 2));
        for a in 0..d {
            dy0[a] = xn[a] - x[a];
            dy1[a] = xnn[a] - xn[a];
            v[a] = dy0[a] / dt;
        }
        weight.mul_into(&v, &mut wv);
        weight.mul_into(&dy0, &mut wdy0);
        weight.mul_into(&dy1, &mut wdy1);
        for (slot, &idx) in idxs.iter().enumerate() {
            let (c, v0) = library.eval_term(idx, x);
            let (_, v1) = library.eval_term(idx, xn);
            comps[slot] = c;
            vals0[slot] = v0;
            vals1[slot] = v1;
        }
        for i in 0..nb {
            let mi = (vals0[i] + vals1[i]) * half;
            let ci = comps[i];
            y[i] += mi * wv[ci];
            for j in 0..nb {
                g[(i, j)] += mi * weight.entry(ci, comps[j]) * vals0[j];
            }
            // Correction: the instantaneous diffusion (current increment
            // plus symmetrized lag-one cross term) contracted with the
            // basis gradient at the observed position.
            let exps = match library.function(idxs[i]) {
                BasisFunction::Monomial { exponents, .. } => exponents,
                BasisFunction::Field { .. } => unreachable!("grid term in ordinary fit"),
            };
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for b in 0..d {
                if exps[b] > 0 {
                    let gb = monomial_partial(exps, x, b);
                    s1 += gb * wdy0[b];
                    s2 += gb * wdy1[b];
                }
            }
            corr[i] += (s1 * dy0[ci] + s2 * dy0[ci] + s1 * dy1[ci]) / (two * dt);
        }
    }
    let scale = T::one() / T::from_usize(rows).unwrap();
    g *= scale;
    y *= scale;
    corr *= scale;

    let coefficients: Vec<T> = if nb == 0 {
        Vec::new()
    } else {
        let rhs = &y - &corr;
        Factorized::new(g.clone(), MatKind::Gram)?
            .solve(&rhs)?
            .iter()
            .cloned()
            .collect()
    };
    // Scored with the lagged-family likelihood, the noise-robust score
    // both measurement-noise estimators share.
    let opts = BuildOpts {
        weight: Some((weight, est)),
        ..BuildOpts::default()
    };
    let cache = FitCache::build_shift(traj, library, Some(model), opts)?;
    let log_likelihood = cache.evaluate(model, &coefficients)?;
    check_finite(&coefficients)?;
    Ok(FitResult {
        model: model.clone(),
        coefficients,
        log_likelihood,
        tau: cache.tau(),
        gram: symmetrized(g),
        diffusion: cache.diffusion().clone(),
        estimator: EstimatorKind::Stratonovich,
    })
}

/// Basis Gram matrix under an explicit symmetric positive-definite weight,
/// averaged over the rows that have increments (all states but the last).
pub fn gram<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
    weight: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let d = library.state_dim().ok_or_else(|| Error::Unsupported {
        reason: "explicit-weight Gram is only defined for ordinary libraries".into(),
    })?;
    if traj.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "trajectory dimension for library",
            expected: d,
            got: traj.dim(),
        });
    }
    if weight.nrows() != d || weight.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "weight matrix",
            expected: d,
            got: weight.nrows(),
        });
    }
    if model.is_empty() {
        return Err(Error::invalid("Gram of an empty model"));
    }
    if traj.len() < 2 {
        return Err(Error::InsufficientData {
            what: "Gram average",
            needed: 2,
            got: traj.len(),
        });
    }
    for i in 0..d {
        for j in 0..i {
            if (weight[(i, j)] - weight[(j, i)]).abs() > T::of(1e-10) {
                return Err(Error::SingularWeight);
            }
        }
    }
    // Positive-definiteness proxy: reject non-invertible weights.
    Factorized::new(weight.clone(), MatKind::Weight)?;

    let nb = model.len();
    let rows = traj.len() - 1;
    let mut g = DMatrix::<T>::zeros(nb, nb);
    let mut vals = vec![T::zero(); nb];
    let mut comps = vec![0usize; nb];
    for k in 0..rows {
        let x = traj.row(k);
        for (slot, &idx) in model.indices().iter().enumerate() {
            let (c, val) = library.eval_term(idx, x);
            comps[slot] = c;
            vals[slot] = val;
        }
        for i in 0..nb {
            for j in i..nb {
                g[(i, j)] += vals[i] * weight[(comps[i], comps[j])] * vals[j];
            }
        }
    }
    let scale = T::one() / T::from_usize(rows).unwrap();
    for i in 0..nb {
        for j in i..nb {
            let v = g[(i, j)] * scale;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Predicted mean-square error of each fitted coefficient, (2 tau)^-1 times
/// the diagonal of the inverse Gram.
pub fn coefficient_variance<T: Scalar>(fit: &FitResult<T>) -> Result<Vec<T>> {
    if fit.model.is_empty() {
        return Ok(Vec::new());
    }
    let inv = Factorized::new(fit.gram.clone(), MatKind::Gram)?.inverse()?;
    let s = T::one() / (T::of(2.0) * fit.tau);
    Ok((0..inv.nrows()).map(|i| inv[(i, i)] * s).collect())
}

fn with_weight<T: Scalar>(diffusion: &DiffusionEstimate<T>) -> Result<BuildOpts<T>> {
    Ok(BuildOpts {
        weight: Some((diffusion.weight()?, diffusion.clone())),
        ..BuildOpts::default()
    })
}

fn finish<T: Scalar>(
    cache: &FitCache<T>,
    model: &ModelBasis,
    estimator: EstimatorKind,
) -> Result<FitResult<T>> {
    let scored = cache.score(model)?;
    check_finite(&scored.coefficients)?;
    Ok(FitResult {
        model: model.clone(),
        coefficients: scored.coefficients,
        log_likelihood: scored.log_likelihood,
        tau: cache.tau(),
        gram: symmetrized(cache.model_gram(model)?),
        diffusion: cache.diffusion().clone(),
        estimator,
    })
}

fn check_finite<T: Scalar>(coefficients: &[T]) -> Result<()> {
    if coefficients.iter().any(|c| c.not_finite()) {
        return Err(Error::domain("fit produced non-finite coefficients"));
    }
    Ok(())
}

fn symmetrized<T: Scalar>(g: DMatrix<T>) -> DMatrix<T> {
    let gt = g.transpose();
    (g + gt) * T::of(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::polynomial_library;
    use crate::estimators::diffusion::{
        diffusion_simple, diffusion_three_point, DiffusionMethod, DiffusionValue,
    };
    use crate::sde::{simulate, BurnIn, DriftSpec, NoiseSpec};
    use nalgebra::dmatrix;

    fn ou1(dt_sim: f64, n: usize, seed: u64) -> Trajectory<f64> {
        let drift = DriftSpec::Ou { a: dmatrix![1.0] };
        let noise = NoiseSpec::AdditiveScalar { d: 1.0 };
        simulate(&drift, &noise, &[0.0], dt_sim, n, seed, BurnIn::Default)
            .unwrap()
            .trajectory
    }

    /// Library {1, x} for one dimension; index 1 is the linear term.
    fn lib1() -> BasisLibrary {
        polynomial_library(1, 1).unwrap()
    }

    fn linear_model() -> ModelBasis {
        ModelBasis::new(vec![1]).unwrap()
    }

    #[test]
    fn aml_recovers_linear_relaxation_rate() {
        // tau = 1000 at fine sampling: predicted coefficient spread is
        // sqrt(1/(2 tau G)) with G = <x^2>/(4D) = 1/4, so about 0.045.
        let traj = ou1(0.01, 100_000, 42);
        let lib = lib1();
        let est = diffusion_simple(&traj).unwrap();
        let fit = fit_aml(&traj, &lib, &linear_model(), &est).unwrap();
        assert!(
            (fit.coefficients[0] + 1.0).abs() < 3.0 * 0.045,
            "alpha {}",
            fit.coefficients[0]
        );
        let var = coefficient_variance(&fit).unwrap()[0];
        assert!(
            (0.5e-3..8e-3).contains(&var),
            "predicted coefficient variance {var}"
        );
    }

    #[test]
    fn noise_free_constant_drift_is_exact() {
        let xs: Vec<f64> = (0..200).map(|k| 3.0 * 0.1 * k as f64).collect();
        let traj = Trajectory::from_flat(xs, 1, 0.1).unwrap();
        let lib = lib1();
        let model = ModelBasis::new(vec![0]).unwrap();
        // The drift-free three-point estimate is exactly zero here, so the
        // weight has to come from the simple estimator for both fits.
        let est = diffusion_simple(&traj).unwrap();
        let aml = fit_aml(&traj, &lib, &model, &est).unwrap();
        let tr = fit_trapeze(&traj, &lib, &model, &est).unwrap();
        assert!((aml.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((tr.coefficients[0] - 3.0).abs() < 1e-12);
        assert!(aml.log_likelihood.abs() < 1e-9);
    }

    #[test]
    fn collinear_data_reports_singular_gram() {
        // Two library functions that read identical state components.
        let xs: Vec<f64> = (0..100)
            .flat_map(|k| {
                let x = (k as f64 * 0.37).sin();
                [x, x]
            })
            .collect();
        let traj = Trajectory::from_flat(xs, 2, 0.1).unwrap();
        let lib = polynomial_library(2, 1).unwrap();
        let x1_e0 = lib
            .index_of(&BasisFunction::monomial(0, vec![1, 0]).unwrap())
            .unwrap();
        let x2_e0 = lib
            .index_of(&BasisFunction::monomial(0, vec![0, 1]).unwrap())
            .unwrap();
        let model = ModelBasis::new(vec![x1_e0, x2_e0]).unwrap();
        // The duplicated component also degenerates the empirical diffusion,
        // so supply a well-posed one; the Gram must be the failing piece.
        let est = DiffusionEstimate {
            value: DiffusionValue::Matrix(DMatrix::identity(2, 2) * 0.25),
            method: DiffusionMethod::Simple,
            indefinite: false,
        };
        assert!(matches!(
            fit_aml(&traj, &lib, &model, &est),
            Err(Error::SingularGram)
        ));
    }

    #[test]
    fn trapeze_shrinks_coarse_sampling_bias() {
        // Continuous-time data observed at dt = 0.5. The left-endpoint
        // regression converges to -(1 - e^-dt)/dt = -0.787, the midpoint
        // variant to -(2/dt)(1 - q)/(1 + q) = -0.980 with q = e^-dt.
        let fine = ou1(0.001, 5_000_000, 7);
        let traj = fine.subsample(500).unwrap();
        let lib = lib1();
        let model = linear_model();
        let aml = fit_aml(&traj, &lib, &model, &diffusion_simple(&traj).unwrap()).unwrap();
        let tr = fit_trapeze(&traj, &lib, &model, &diffusion_three_point(&traj).unwrap()).unwrap();
        let (a, t) = (aml.coefficients[0], tr.coefficients[0]);
        assert!((a + 0.7869).abs() < 0.06, "left-endpoint estimate {a}");
        assert!((t + 0.9799).abs() < 0.06, "midpoint estimate {t}");
        assert!((t + 1.0).abs() < (a + 1.0).abs());
    }

    #[test]
    fn shift_and_stratonovich_survive_measurement_noise() {
        // sigma^2/dt = 9 dwarfs <f^2> = 1: the plain fit sees a spurious
        // fast relaxation while the lagged and corrected ones stay near -1.
        let clean = ou1(0.01, 100_000, 19);
        let noisy = clean.add_measurement_noise(0.3, 77).unwrap();
        let lib = lib1();
        let model = linear_model();
        let aml = fit_aml(&noisy, &lib, &model, &diffusion_simple(&noisy).unwrap()).unwrap();
        let sh = fit_shift(
            &noisy,
            &lib,
            &model,
            &crate::estimators::diffusion_vestergaard(&noisy).unwrap(),
        )
        .unwrap();
        let st = fit_stratonovich(&noisy, &lib, &model).unwrap();
        assert!(aml.coefficients[0] < -5.0, "plain fit {}", aml.coefficients[0]);
        assert!(
            (sh.coefficients[0] + 1.0).abs() < 0.2,
            "lagged fit {}",
            sh.coefficients[0]
        );
        assert!(
            (st.coefficients[0] + 1.0).abs() < 0.2,
            "corrected fit {}",
            st.coefficients[0]
        );
    }

    #[test]
    fn stratonovich_matches_aml_on_clean_data() {
        let traj = ou1(0.01, 50_000, 23);
        let lib = lib1();
        let model = linear_model();
        let aml = fit_aml(&traj, &lib, &model, &diffusion_simple(&traj).unwrap()).unwrap();
        let st = fit_stratonovich(&traj, &lib, &model).unwrap();
        assert!(
            (st.coefficients[0] - aml.coefficients[0]).abs() < 0.05,
            "{} vs {}",
            st.coefficients[0],
            aml.coefficients[0]
        );
        assert_eq!(st.estimator, EstimatorKind::Stratonovich);
    }

    #[test]
    fn stratonovich_correction_vanishes_for_constant_basis() {
        // With gradient-free functions the corrected fit is plain midpoint
        // regression, which reproduces a constant drift exactly.
        let xs: Vec<f64> = (0..400).map(|k| 0.01 * k as f64).collect();
        let traj = Trajectory::from_flat(xs, 1, 0.01).unwrap();
        let lib = lib1();
        let model = ModelBasis::new(vec![0]).unwrap();
        let fit = fit_stratonovich(&traj, &lib, &model).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn explicit_weight_gram_of_orthogonal_constants() {
        let xs: Vec<f64> = (0..50).flat_map(|k| [k as f64, -(k as f64)]).collect();
        let traj = Trajectory::from_flat(xs, 2, 1.0).unwrap();
        let lib = polynomial_library(2, 0).unwrap();
        let model = ModelBasis::full(lib.len());
        let eye = DMatrix::identity(2, 2);
        let g = gram(&traj, &lib, &model, &eye).unwrap();
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 0)], 0.0);
        assert!((g[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((g[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(gram(&traj, &lib, &ModelBasis::empty(), &eye).is_err());
    }

    #[test]
    fn gram_is_symmetric_on_generic_data() {
        let traj = ou1(0.01, 2_000, 5);
        let lib = lib1();
        let model = ModelBasis::full(lib.len());
        let w = dmatrix![2.0];
        let g = gram(&traj, &lib, &model, &w).unwrap();
        let asym = (&g - g.transpose()).amax();
        assert!(asym <= 1e-12);
        // Fit grams are symmetrized too, whatever the family.
        let est = diffusion_three_point(&traj).unwrap();
        let fit = fit_trapeze(&traj, &lib, &model, &est).unwrap();
        let asym = (&fit.gram - fit.gram.transpose()).amax();
        assert!(asym <= 1e-12);
    }

    #[test]
    fn fit_results_round_trip_through_json() {
        let traj = ou1(0.01, 1_000, 3);
        let lib = lib1();
        let est = diffusion_simple(&traj).unwrap();
        let fit = fit_aml(&traj, &lib, &linear_model(), &est).unwrap();
        let text = serde_json::to_string(&fit).unwrap();
        let back: FitResult<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, fit.model);
        assert_eq!(back.coefficients, fit.coefficients);
        assert_eq!(back.estimator, fit.estimator);
    }
}
