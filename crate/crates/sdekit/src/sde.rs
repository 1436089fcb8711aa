//! Euler-Maruyama simulation of Langevin dynamics dx = f(x) dt + sqrt(2D) dW.
//!
//! Drifts are either closed-form benchmark fields or an explicit expansion
//! over a basis library; noise is additive (scalar or matrix covariance) or
//! diagonal multiplicative, interpreted in the Ito sense with amplitudes
//! evaluated at the pre-step state. All randomness is derived from a `u64`
//! seed, so trajectories are reproducible bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::BasisLibrary;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::{rng_for, stream};
use crate::trajectory::Trajectory;

/// Population floor for competitive dynamics. Multiplicative noise scales
/// with the state, so once a component reaches zero it can never recover;
/// clamping keeps the dynamics defined while counting the interventions.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(rename_all = "snake_case")]
pub enum DriftSpec<T: Scalar> {
    /// f = (sigma (x3 - x1), x1 x3 - beta x2, x1 (rho - x2) - x3).
    Lorenz { sigma: T, rho: T, beta: T },
    /// Linear relaxation f = -A x.
    Ou { a: DMatrix<T> },
    /// Competitive populations f_i = x_i (r_i - sum_j A_ij x_j).
    LotkaVolterra { r: DVector<T>, a: DMatrix<T> },
    /// Explicit expansion f = sum_i alpha_i b_i over a full library.
    Linear { library: BasisLibrary, alpha: Vec<T> },
}

impl<T: Scalar> DriftSpec<T> {
    /// State dimension after consistency checks.
    pub fn validate(&self) -> Result<usize> {
        match self {
            DriftSpec::Lorenz { .. } => Ok(3),
            DriftSpec::Ou { a } => {
                if a.nrows() != a.ncols() || a.nrows() == 0 {
                    return Err(Error::invalid("relaxation matrix must be square"));
                }
                Ok(a.nrows())
            }
            DriftSpec::LotkaVolterra { r, a } => {
                if a.nrows() != a.ncols() || a.nrows() != r.len() || r.is_empty() {
                    return Err(Error::invalid(
                        "interaction matrix must be square and match the rate vector",
                    ));
                }
                Ok(r.len())
            }
            DriftSpec::Linear { library, alpha } => {
                let d = library.state_dim().ok_or_else(|| {
                    Error::invalid("explicit drift requires an ordinary (non-grid) library")
                })?;
                if alpha.len() != library.len() {
                    return Err(Error::DimensionMismatch {
                        what: "drift coefficient vector",
                        expected: library.len(),
                        got: alpha.len(),
                    });
                }
                Ok(d)
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.validate().expect("invalid drift specification")
    }

    pub fn eval_into(&self, x: &[T], out: &mut [T]) {
        match self {
            DriftSpec::Lorenz { sigma, rho, beta } => {
                let (x1, x2, x3) = (x[0], x[1], x[2]);
                out[0] = *sigma * (x3 - x1);
                out[1] = x1 * x3 - *beta * x2;
                out[2] = x1 * (*rho - x2) - x3;
            }
            DriftSpec::Ou { a } => {
                let d = x.len();
                for i in 0..d {
                    let mut s = T::zero();
                    for (j, &xj) in x.iter().enumerate() {
                        s += a[(i, j)] * xj;
                    }
                    out[i] = -s;
                }
            }
            DriftSpec::LotkaVolterra { r, a } => {
                let d = x.len();
                for i in 0..d {
                    let mut s = T::zero();
                    for (j, &xj) in x.iter().enumerate() {
                        s += a[(i, j)] * xj;
                    }
                    out[i] = x[i] * (r[i] - s);
                }
            }
            DriftSpec::Linear { library, alpha } => {
                out.fill(T::zero());
                for (idx, &c) in alpha.iter().enumerate() {
                    if c != T::zero() {
                        let (comp, v) = library.eval_term(idx, x);
                        out[comp] += c * v;
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        self.eval_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec<T: Scalar> {
    /// Isotropic additive noise sqrt(2 d) dW per component.
    AdditiveScalar { d: T },
    /// Correlated additive noise with covariance rate 2 D (D symmetric PSD).
    AdditiveMatrix { d: DMatrix<T> },
    /// Diagonal multiplicative noise sqrt(2 d0 x_i^2) dW_i.
    MultiplicativeDiagonal { d0: T },
}

/// Noise amplitude resolved against a state dimension, ready to apply.
enum PreparedNoise<T: Scalar> {
    Scalar { amp: T },
    Matrix { l: DMatrix<T> },
    MultDiag { amp: T },
}

impl<T: Scalar> NoiseSpec<T> {
    fn prepare(&self, d: usize) -> Result<PreparedNoise<T>> {
        let two = T::of(2.0);
        match self {
            NoiseSpec::AdditiveScalar { d: diff } => {
                if *diff < T::zero() {
                    return Err(Error::invalid("diffusion constant must be non-negative"));
                }
                Ok(PreparedNoise::Scalar {
                    amp: (two * *diff).sqrt(),
                })
            }
            NoiseSpec::AdditiveMatrix { d: m } => {
                if m.nrows() != d || m.ncols() != d {
                    return Err(Error::DimensionMismatch {
                        what: "diffusion matrix",
                        expected: d,
                        got: m.nrows(),
                    });
                }
                Ok(PreparedNoise::Matrix {
                    l: psd_factor(&(m * two))?,
                })
            }
            NoiseSpec::MultiplicativeDiagonal { d0 } => {
                if *d0 < T::zero() {
                    return Err(Error::invalid("noise strength must be non-negative"));
                }
                Ok(PreparedNoise::MultDiag {
                    amp: (two * *d0).sqrt(),
                })
            }
        }
    }
}

/// Factor L with L L^T = m for symmetric PSD m, tolerating zero eigenvalues
/// (e.g. a noiseless component). Built from the symmetric eigendecomposition;
/// eigenvalues below a small negative tolerance reject the matrix.
fn psd_factor<T: Scalar>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let sym = (m + m.transpose()) * T::of(0.5);
    if (m - &sym).amax() > T::of(1e-10) * (T::one() + sym.amax()) {
        return Err(Error::invalid("covariance matrix must be symmetric"));
    }
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax().max(T::one());
    let tol = T::of(-1e-12) * max;
    let mut l = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < tol {
            return Err(Error::invalid("covariance matrix has a negative eigenvalue"));
        }
        let s = lam.max(T::zero()).sqrt();
        for i in 0..l.nrows() {
            l[(i, j)] *= s;
        }
    }
    Ok(l)
}

/// Thermalization policy for [`simulate`]. `Default` discards 10 time units,
/// long enough for every benchmark system here to forget its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurnIn {
    None,
    Default,
    Steps(usize),
}

impl BurnIn {
    fn steps<T: Scalar>(self, dt_sim: T) -> usize {
        match self {
            BurnIn::None => 0,
            BurnIn::Steps(n) => n,
            BurnIn::Default => (T::of(10.0) / dt_sim).ceil().to_usize().unwrap_or(0),
        }
    }
}

pub struct SimResult<T: Scalar> {
    pub trajectory: Trajectory<T>,
    /// Times a population component was lifted back to [`POSITIVITY_FLOOR`].
    /// Always zero for non-population drifts.
    pub clamp_count: usize,
}

/// Integrates the SDE from `x0` and records `n_steps + 1` states at spacing
/// `dt_sim` (after the burn-in, whose states are discarded). Fails with
/// [`Error::NonFinite`] if the state diverges; the reported step counts from
/// the start of integration, burn-in included.
pub fn simulate<T: Scalar>(
    drift: &DriftSpec<T>,
    noise: &NoiseSpec<T>,
    x0: &[T],
    dt_sim: T,
    n_steps: usize,
    seed: u64,
    burn_in: BurnIn,
) -> Result<SimResult<T>>
where
    StandardNormal: Distribution<T>,
{
    let d = drift.validate()?;
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: d,
            got: x0.len(),
        });
    }
    if dt_sim <= T::zero() {
        return Err(Error::invalid("dt_sim must be positive"));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let prepared = noise.prepare(d)?;
    let clamp = matches!(drift, DriftSpec::LotkaVolterra { .. });
    let floor = T::of(POSITIVITY_FLOOR);
    let sqrt_dt = dt_sim.sqrt();
    let mut rng = rng_for(seed, stream::SIMULATE);

    let mut x = x0.to_vec();
    let mut f = vec![T::zero(); d];
    let mut xi = vec![T::zero(); d];
    let mut clamp_count = 0usize;
    let burn = burn_in.steps(dt_sim);
    let mut data = Vec::with_capacity((n_steps + 1) * d);

    let step_once = |x: &mut Vec<T>,
                         f: &mut Vec<T>,
                         xi: &mut Vec<T>,
                         rng: &mut ChaCha8Rng,
                         clamp_count: &mut usize,
                         step: usize|
     -> Result<()> {
        drift.eval_into(x, f);
        for z in xi.iter_mut() {
            *z = StandardNormal.sample(rng) * sqrt_dt;
        }
        match &prepared {
            PreparedNoise::Scalar { amp } => {
                for i in 0..d {
                    x[i] += f[i] * dt_sim + *amp * xi[i];
                }
            }
            PreparedNoise::Matrix { l } => {
                for i in 0..d {
                    let mut n = T::zero();
                    for (j, &z) in xi.iter().enumerate() {
                        n += l[(i, j)] * z;
                    }
                    x[i] += f[i] * dt_sim + n;
                }
            }
            PreparedNoise::MultDiag { amp } => {
                for i in 0..d {
                    let xc = x[i];
                    x[i] = xc + f[i] * dt_sim + *amp * xc * xi[i];
                }
            }
        }
        for v in x.iter_mut() {
            if clamp && *v < floor {
                *v = floor;
                *clamp_count += 1;
            }
            if v.not_finite() {
                return Err(Error::NonFinite { step });
            }
        }
        Ok(())
    };

    for step in 0..burn {
        step_once(&mut x, &mut f, &mut xi, &mut rng, &mut clamp_count, step)?;
    }
    data.extend_from_slice(&x);
    for k in 0..n_steps {
        step_once(&mut x, &mut f, &mut xi, &mut rng, &mut clamp_count, burn + k)?;
        data.extend_from_slice(&x);
    }

    Ok(SimResult {
        trajectory: Trajectory::from_flat(data, d, dt_sim)?,
        clamp_count,
    })
}

/// Everything needed to regenerate or interpret a stored trajectory; written
/// as the JSON sidecar next to the CSV samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SimMeta<T: Scalar> {
    pub dt: T,
    pub d: usize,
    pub seed: u64,
    pub drift: DriftSpec<T>,
    pub noise: NoiseSpec<T>,
}

pub fn write_sidecar<T: Scalar>(path: impl AsRef<Path>, meta: &SimMeta<T>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, meta)?;
    Ok(())
}

pub fn read_sidecar<T: Scalar>(path: impl AsRef<Path>) -> Result<SimMeta<T>> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}

/// The benchmark systems with their published parameters, as
/// (drift, noise, starting state).
pub mod systems {
    use super::*;

    /// Chaotic three-dimensional flow with strong additive noise:
    /// sigma = 10, rho = 28, beta = 8/3, D = 100.
    pub fn lorenz<T: Scalar>() -> (DriftSpec<T>, NoiseSpec<T>, Vec<T>) {
        (
            DriftSpec::Lorenz {
                sigma: T::of(10.0),
                rho: T::of(28.0),
                beta: T::of(8.0 / 3.0),
            },
            NoiseSpec::AdditiveScalar { d: T::of(100.0) },
            vec![T::one(), T::one(), T::one()],
        )
    }

    /// Ten-dimensional linear relaxation with a sparse coupling matrix
    /// (19 non-zero entries) and D = 100.
    pub fn ou10<T: Scalar>() -> (DriftSpec<T>, NoiseSpec<T>, Vec<T>) {
        #[rustfmt::skip]
        let rows: [[f64; 10]; 10] = [
            [ 1.,  0.,  0.,  0.,  0.,  0.,  0.,  0.,  0.,  0.],
            [ 0.,  1.,  0.,  0.,  0.,  0.,  0.,  0.,  1.,  0.],
            [ 0.,  0.,  1., -1.,  0.,  0.,  0.,  0.,  0.,  0.],
            [ 0.,  0.,  0.,  1.,  0.,  0.,  0.,  0.,  0.,  0.],
            [ 0.,  0.,  0.,  0.,  1.,  0.,  0.,  0.,  0.,  0.],
            [ 0.,  0.,  0.,  0.,  0.,  1.,  0.,  0.,  0.,  0.],
            [-1.,  0.,  0.,  0.,  0.,  0.,  1.,  0.,  0.,  0.],
            [ 0.,  0.,  0.,  0.,  0.,  0.,  0.,  1.,  0.,  0.],
            [ 0., -1.,  0.,  0.,  0., -1.,  1.,  0.,  1.,  0.],
            [ 0.,  0.,  1.,  0.,  0.,  1.,  0.,  1.,  0.,  1.],
        ];
        let a = DMatrix::from_fn(10, 10, |i, j| T::of(rows[i][j]));
        (
            DriftSpec::Ou { a },
            NoiseSpec::AdditiveScalar { d: T::of(100.0) },
            vec![T::zero(); 10],
        )
    }

    /// Three-dimensional linear relaxation used as the small test system:
    /// identity damping plus one cross-coupling, so the minimal model has
    /// four terms; D = 1.
    pub fn ou3<T: Scalar>() -> (DriftSpec<T>, NoiseSpec<T>, Vec<T>) {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 0)] = T::of(-1.0);
        (
            DriftSpec::Ou { a },
            NoiseSpec::AdditiveScalar { d: T::one() },
            vec![T::zero(); 3],
        )
    }

    /// Seven competing species with unit growth rates, a sparse interaction
    /// matrix (25 non-zero entries), and multiplicative noise D0 = 0.05.
    pub fn lv7<T: Scalar>() -> (DriftSpec<T>, NoiseSpec<T>, Vec<T>) {
        #[rustfmt::skip]
        let rows: [[f64; 7]; 7] = [
            [ 1.,  1.,  1.,  0.,  0.,  0., -1.],
            [-1.,  1.,  1.,  0.,  0.,  0.,  0.],
            [ 1., -1.,  1.,  1.,  1.,  0.,  0.],
            [ 0.,  0., -1.,  1.,  1.,  0.,  0.],
            [ 0.,  0.,  1., -1.,  1.,  1.,  0.],
            [ 0.,  0.,  0.,  0., -1.,  1.,  1.],
            [ 1.,  0.,  0.,  0.,  0., -1.,  1.],
        ];
        let a = DMatrix::from_fn(7, 7, |i, j| T::of(rows[i][j]));
        (
            DriftSpec::LotkaVolterra {
                r: DVector::from_element(7, T::one()),
                a,
            },
            NoiseSpec::MultiplicativeDiagonal { d0: T::of(0.05) },
            vec![T::of(0.5); 7],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou1(a: f64) -> DriftSpec<f64> {
        DriftSpec::Ou {
            a: DMatrix::from_element(1, 1, a),
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (drift, noise, x0) = systems::lorenz::<f64>();
        let a = simulate(&drift, &noise, &x0, 1e-3, 500, 42, BurnIn::Steps(100)).unwrap();
        let b = simulate(&drift, &noise, &x0, 1e-3, 500, 42, BurnIn::Steps(100)).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        let c = simulate(&drift, &noise, &x0, 1e-3, 500, 43, BurnIn::Steps(100)).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn noiseless_relaxation_matches_exponential() {
        let noise = NoiseSpec::AdditiveScalar { d: 0.0 };
        let out = simulate(&ou1(1.0), &noise, &[1.0], 1e-3, 1000, 0, BurnIn::None).unwrap();
        let last = out.trajectory.row(1000)[0];
        assert!(
            (last - (-1.0f64).exp()).abs() <= 1e-3,
            "final state {last} vs 1/e"
        );
    }

    #[test]
    fn integration_error_halves_with_dt() {
        // Deterministic relaxation to t = 1; the one-step method's global
        // error must scale linearly in dt.
        let noise = NoiseSpec::AdditiveScalar { d: 0.0 };
        let exact = (-1.0f64).exp();
        let run = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let out = simulate(&ou1(1.0), &noise, &[1.0], dt, n, 0, BurnIn::None).unwrap();
            (out.trajectory.row(n)[0] - exact).abs()
        };
        let ratio = run(0.01) / run(0.005);
        assert!((1.5..=2.5).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn brownian_msd_matches_2dt() {
        // Pure diffusion with D = 2: mean squared displacement after t = 1
        // is 2 D t = 4, checked within three standard errors over 1000 paths.
        let drift = ou1(0.0);
        let noise = NoiseSpec::AdditiveScalar { d: 2.0 };
        let n_paths = 1000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seed in 0..n_paths {
            let out = simulate(&drift, &noise, &[0.0], 1e-3, 1000, seed, BurnIn::None).unwrap();
            let x = out.trajectory.row(1000)[0];
            sum += x * x;
            sum_sq += x * x * x * x;
        }
        let mean = sum / n_paths as f64;
        let var = sum_sq / n_paths as f64 - mean * mean;
        let se = (var / n_paths as f64).sqrt();
        assert!(
            (mean - 4.0).abs() <= 3.0 * se,
            "msd {mean} vs 4.0 (se {se})"
        );
    }

    #[test]
    fn chaotic_system_stays_bounded() {
        let (drift, noise, x0) = systems::lorenz::<f64>();
        let mut bounded = 0;
        for seed in 0..20 {
            let out = simulate(&drift, &noise, &x0, 1e-3, 10_000, seed, BurnIn::Default).unwrap();
            let ok = out
                .trajectory
                .rows()
                .all(|r| r.iter().all(|v| v.abs() < 500.0));
            bounded += ok as usize;
        }
        assert!(bounded >= 19, "only {bounded}/20 runs stayed bounded");
    }

    #[test]
    fn population_model_stays_positive_with_clamping() {
        let (drift, noise, x0) = systems::lv7::<f64>();
        let out = simulate(&drift, &noise, &x0, 1e-3, 20_000, 7, BurnIn::Default).unwrap();
        assert!(out
            .trajectory
            .rows()
            .all(|r| r.iter().all(|&v| v >= POSITIVITY_FLOOR)));

        // Violent noise forces floor hits, which are counted, not fatal.
        let harsh = NoiseSpec::MultiplicativeDiagonal { d0: 5.0 };
        let out = simulate(&drift, &harsh, &x0, 0.01, 5000, 3, BurnIn::None).unwrap();
        assert!(out.clamp_count > 0);
        assert!(out
            .trajectory
            .rows()
            .all(|r| r.iter().all(|&v| v >= POSITIVITY_FLOOR)));
    }

    #[test]
    fn divergence_reports_nonfinite() {
        // Anti-damping blows up from machine noise within a few hundred steps.
        let out = simulate(
            &ou1(-100.0),
            &NoiseSpec::AdditiveScalar { d: 1.0 },
            &[1.0],
            0.1,
            10_000,
            0,
            BurnIn::None,
        );
        assert!(matches!(out, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matrix_noise_produces_requested_correlation() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let noise = NoiseSpec::AdditiveMatrix { d };
        let drift = DriftSpec::Ou {
            a: DMatrix::zeros(2, 2),
        };
        let out = simulate(&drift, &noise, &[0.0, 0.0], 0.01, 20_000, 5, BurnIn::None).unwrap();
        let inc = out.trajectory.increments();
        let n = inc.nrows() as f64;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for k in 0..inc.nrows() {
            sxx += inc[(k, 0)] * inc[(k, 0)];
            syy += inc[(k, 1)] * inc[(k, 1)];
            sxy += inc[(k, 0)] * inc[(k, 1)];
        }
        let corr = sxy / n / ((sxx / n) * (syy / n)).sqrt();
        assert!((corr - 0.9).abs() < 0.05, "increment correlation {corr}");
    }

    #[test]
    fn psd_validation() {
        let not_sym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(NoiseSpec::AdditiveMatrix { d: not_sym }
            .prepare(2)
            .is_err());
        let negative = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseSpec::AdditiveMatrix { d: negative }
            .prepare(2)
            .is_err());
        // Semi-definite (rank one) is allowed.
        let semi = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(NoiseSpec::AdditiveMatrix { d: semi }.prepare(2).is_ok());
    }

    #[test]
    fn burn_in_discards_the_transient() {
        let (drift, noise, x0) = systems::lorenz::<f64>();
        let cold = simulate(&drift, &noise, &x0, 1e-3, 10, 1, BurnIn::None).unwrap();
        let warm = simulate(&drift, &noise, &x0, 1e-3, 10, 1, BurnIn::Default).unwrap();
        assert_eq!(cold.trajectory.len(), 11);
        assert_eq!(warm.trajectory.len(), 11);
        assert_ne!(cold.trajectory.row(0), warm.trajectory.row(0));
    }

    #[test]
    fn dimension_checks() {
        let (drift, noise, _) = systems::lorenz::<f64>();
        assert!(matches!(
            simulate(&drift, &noise, &[1.0, 2.0], 1e-3, 10, 0, BurnIn::None),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = NoiseSpec::AdditiveMatrix {
            d: DMatrix::identity(2, 2),
        };
        assert!(simulate(&drift, &bad, &[1.0; 3], 1e-3, 10, 0, BurnIn::None).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let (drift, noise, _) = systems::lv7::<f64>();
        let meta = SimMeta {
            dt: 0.01,
            d: 7,
            seed: 99,
            drift,
            noise,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        write_sidecar(&path, &meta).unwrap();
        let back: SimMeta<f64> = read_sidecar(&path).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.d, 7);
        assert_eq!(back.drift, meta.drift);
        assert_eq!(back.noise, meta.noise);
    }
}
