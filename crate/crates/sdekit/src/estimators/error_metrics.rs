use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::cache::{BuildOpts, FitCache};
use super::diffusion::DiffusionEstimate;
use super::fit::FitResult;
use super::linalg::{Factorized, MatKind};
use crate::basis::{BasisLibrary, ModelBasis};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::trajectory::Trajectory;

/// Weighted mean-square discrepancy between a fitted drift and the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DriftErrorReport<T: Scalar> {
    /// <(f - f_hat)^T (4 Dbar)^-1 (f - f_hat)> along the trajectory.
    pub raw: T,
    /// Raw error over the same form of the truth against zero, so the
    /// null model scores exactly 1.
    pub normalized: T,
}

/// Compares a fit against the generating drift, both expressed in the
/// library, averaging over the same rows the estimators use (all states
/// but the last). Works for ordinary and grid trajectories alike.
pub fn drift_error<T: Scalar>(
    fit: &FitResult<T>,
    truth_model: &ModelBasis,
    truth_alpha: &[T],
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    diffusion: &DiffusionEstimate<T>,
) -> Result<DriftErrorReport<T>> {
    if truth_alpha.len() != truth_model.len() {
        return Err(Error::DimensionMismatch {
            what: "truth coefficients",
            expected: truth_model.len(),
            got: truth_alpha.len(),
        });
    }
    if traj.len() < 2 {
        return Err(Error::InsufficientData {
            what: "drift error average",
            needed: 2,
            got: traj.len(),
        });
    }
    let weight = diffusion.weight()?;
    let d = traj.dim();
    let rows = traj.len() - 1;
    let mut f = vec![T::zero(); d];
    let mut fh = vec![T::zero(); d];
    let mut r = vec![T::zero(); d];
    let mut wr = vec![T::zero(); d];
    let mut raw_acc = T::zero();
    let mut null_acc = T::zero();
    match library.state_dim() {
        Some(ld) => {
            if ld != d {
                return Err(Error::DimensionMismatch {
                    what: "trajectory dimension for library",
                    expected: ld,
                    got: d,
                });
            }
            for k in 0..rows {
                let x = traj.row(k);
                library.drift_into(truth_model, truth_alpha, x, &mut f);
                library.drift_into(&fit.model, &fit.coefficients, x, &mut fh);
                for a in 0..d {
                    r[a] = f[a] - fh[a];
                }
                weight.mul_into(&r, &mut wr);
                for a in 0..d {
                    raw_acc += r[a] * wr[a];
                }
                weight.mul_into(&f, &mut wr);
                for a in 0..d {
                    null_acc += f[a] * wr[a];
                }
            }
        }
        None => {
            let grid = traj.grid().ok_or_else(|| Error::Unsupported {
                reason: "grid library applied to a trajectory without grid metadata".into(),
            })?;
            let cells = grid.cells();
            if d != 2 * cells {
                return Err(Error::DimensionMismatch {
                    what: "grid trajectory dimension",
                    expected: 2 * cells,
                    got: d,
                });
            }
            let w = weight.scalar();
            let mut buf = vec![T::zero(); cells];
            for k in 0..rows {
                let x = traj.row(k);
                field_drift(library, truth_model, truth_alpha, x, grid, &mut buf, &mut f);
                field_drift(
                    library,
                    &fit.model,
                    &fit.coefficients,
                    x,
                    grid,
                    &mut buf,
                    &mut fh,
                );
                for a in 0..d {
                    let ra = f[a] - fh[a];
                    raw_acc += w * ra * ra;
                    null_acc += w * f[a] * f[a];
                }
            }
        }
    }
    let scale = T::one() / T::from_usize(rows).unwrap();
    let raw = raw_acc * scale;
    let null = null_acc * scale;
    if null <= T::zero() {
        return Err(Error::domain(
            "true drift vanishes along the trajectory; normalized error undefined",
        ));
    }
    Ok(DriftErrorReport {
        raw,
        normalized: raw / null,
    })
}

/// Full-state drift field of a grid model at one snapshot.
fn field_drift<T: Scalar>(
    library: &BasisLibrary,
    model: &ModelBasis,
    alpha: &[T],
    state: &[T],
    grid: &crate::spde::GridSpec<T>,
    buf: &mut [T],
    out: &mut [T],
) {
    let cells = grid.cells();
    out.fill(T::zero());
    for (&idx, &a) in model.indices().iter().zip(alpha) {
        let target = library.eval_field_into(idx, state, grid, buf);
        let off = match target {
            crate::basis::FieldId::U => 0,
            crate::basis::FieldId::V => cells,
        };
        for c in 0..cells {
            out[off + c] += a * buf[c];
        }
    }
}

/// Predicted expected normalized drift error of a model,
/// Tr(G^-1 G_multi) / (2 tau), valid under state-dependent noise where the
/// additive-noise value n_B / (2 tau) undershoots. G_multi replaces the
/// averaged diffusion inside the Gram with the instantaneous increment
/// estimate, so its trace picks up the drift-noise correlations.
pub fn error_estimate_multiplicative<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    model: &ModelBasis,
) -> Result<T> {
    if model.is_empty() {
        return Ok(T::zero());
    }
    let cache = FitCache::build_aml(traj, library, Some(model), BuildOpts::default())?;
    let g = cache.model_gram(model)?;
    let weight = cache.diffusion().weight()?;
    let dt = traj.dt();
    let d = traj.dim();
    let nb = model.len();
    let rows = traj.len() - 1;
    let two_over_dt = T::of(2.0) / dt;
    let mut g_multi = DMatrix::<T>::zeros(nb, nb);
    let mut u = vec![T::zero(); nb];
    let mut dx = vec![T::zero(); d];
    let mut wdx = vec![T::zero(); d];
    match library.state_dim() {
        Some(_) => {
            for k in 0..rows {
                let (x, xn) = (traj.row(k), traj.row(k + 1));
                for a in 0..d {
                    dx[a] = xn[a] - x[a];
                }
                weight.mul_into(&dx, &mut wdx);
                for (slot, &idx) in model.indices().iter().enumerate() {
                    let (c, val) = library.eval_term(idx, x);
                    u[slot] = val * wdx[c];
                }
                for i in 0..nb {
                    for j in i..nb {
                        g_multi[(i, j)] += two_over_dt * u[i] * u[j];
                    }
                }
            }
        }
        None => {
            let grid = traj.grid().expect("grid checked by cache build").clone();
            let cells = grid.cells();
            let w = weight.scalar();
            let mut buf = vec![T::zero(); cells];
            for k in 0..rows {
                let (x, xn) = (traj.row(k), traj.row(k + 1));
                for a in 0..d {
                    dx[a] = xn[a] - x[a];
                }
                for (slot, &idx) in model.indices().iter().enumerate() {
                    let target = library.eval_field_into(idx, x, &grid, &mut buf);
                    let off = match target {
                        crate::basis::FieldId::U => 0,
                        crate::basis::FieldId::V => cells,
                    };
                    let mut acc = T::zero();
                    for c in 0..cells {
                        acc += buf[c] * dx[off + c];
                    }
                    u[slot] = w * acc;
                }
                for i in 0..nb {
                    for j in i..nb {
                        g_multi[(i, j)] += two_over_dt * u[i] * u[j];
                    }
                }
            }
        }
    }
    let scale = T::one() / T::from_usize(rows).unwrap();
    for i in 0..nb {
        for j in i..nb {
            let v = g_multi[(i, j)] * scale;
            g_multi[(i, j)] = v;
            g_multi[(j, i)] = v;
        }
    }
    let ginv = Factorized::new(g, MatKind::Gram)?.inverse()?;
    let prod = ginv * g_multi;
    let mut trace = T::zero();
    for i in 0..nb {
        trace += prod[(i, i)];
    }
    Ok(trace / (T::of(2.0) * cache.tau()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{polynomial_library, true_model};
    use crate::estimators::diffusion::diffusion_simple;
    use crate::estimators::fit::fit_aml;
    use crate::sde::{simulate, systems, BurnIn, DriftSpec, NoiseSpec};
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
    fn fit_equal_to_truth_scores_zero() {
        let traj = ou1(5_000, 3);
        let lib = polynomial_library(1, 1).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let est = diffusion_simple(&traj).unwrap();
        let fit = fit_aml(&traj, &lib, &model, &est).unwrap();
        let report =
            drift_error(&fit, &fit.model, &fit.coefficients, &traj, &lib, &est).unwrap();
        assert_eq!(report.raw, 0.0);
        assert_eq!(report.normalized, 0.0);
    }

    #[test]
    fn null_model_normalizes_to_one() {
        let traj = ou1(5_000, 4);
        let lib = polynomial_library(1, 1).unwrap();
        let est = diffusion_simple(&traj).unwrap();
        let null = fit_aml(&traj, &lib, &ModelBasis::empty(), &est).unwrap();
        let report = drift_error(&null, &ModelBasis::new(vec![1]).unwrap(), &[-1.0], &traj, &lib, &est)
            .unwrap();
        assert_eq!(report.normalized, 1.0);
        assert!(report.raw > 0.0);
    }

    #[test]
    fn mean_drift_error_tracks_parameter_count_over_time() {
        // E[error] = n_B / (2 tau) for additive noise; tau = 200 here.
        let (drift, noise, x0) = systems::ou3();
        let lib = polynomial_library(3, 1).unwrap();
        let (truth, alpha) = true_model(&drift, &lib).unwrap();
        let n_b = truth.len() as f64;
        let tau = 200.0;
        let mut mean = 0.0;
        let runs = 20;
        for seed in 0..runs {
            let traj = simulate(&drift, &noise, &x0, 0.01, 20_000, 600 + seed, BurnIn::Default)
                .unwrap()
                .trajectory;
            let est = diffusion_simple(&traj).unwrap();
            let fit = fit_aml(&traj, &lib, &truth, &est).unwrap();
            mean += drift_error(&fit, &truth, &alpha, &traj, &lib, &est)
                .unwrap()
                .raw;
        }
        mean /= runs as f64;
        let expected = n_b / (2.0 * tau);
        assert!(
            (mean / expected - 1.0).abs() < 0.5,
            "mean {mean} vs expected {expected}"
        );
    }

    #[test]
    fn additive_noise_estimate_collapses_to_parameter_count() {
        let traj = ou1(100_000, 9);
        let lib = polynomial_library(1, 1).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let est = error_estimate_multiplicative(&traj, &lib, &model).unwrap();
        let expected = 1.0 / (2.0 * 1000.0);
        assert!(
            (est / expected - 1.0).abs() < 0.15,
            "estimate {est} vs {expected}"
        );
    }

    #[test]
    fn estimate_halves_when_observation_time_doubles() {
        let long = ou1(200_000, 21);
        let lib = polynomial_library(1, 1).unwrap();
        let model = ModelBasis::new(vec![1]).unwrap();
        let full = error_estimate_multiplicative(&long, &lib, &model).unwrap();
        let half_data: Vec<f64> = (0..100_001).map(|k| long.row(k)[0]).collect();
        let half = Trajectory::from_flat(half_data, 1, 0.01).unwrap();
        let short = error_estimate_multiplicative(&half, &lib, &model).unwrap();
        assert!(
            (full / short - 0.5).abs() < 0.1,
            "ratio {} expected 0.5",
            full / short
        );
    }

    #[test]
    fn multiplicative_noise_inflates_the_estimate() {
        let (drift, noise, x0) = systems::lv7();
        let traj = simulate(&drift, &noise, &x0, 0.002, 100_000, 31, BurnIn::Default)
            .unwrap()
            .trajectory;
        let lib = crate::basis::lv_library(7).unwrap();
        let (truth, _) = true_model(&drift, &lib).unwrap();
        let est = error_estimate_multiplicative(&traj, &lib, &truth).unwrap();
        let additive_value = truth.len() as f64 / (2.0 * traj.dt() * 100_000.0);
        assert!(
            est > additive_value,
            "estimate {est} should exceed additive value {additive_value}"
        );
        assert!(est < 10.0 * additive_value, "estimate {est} implausibly large");
    }
}
