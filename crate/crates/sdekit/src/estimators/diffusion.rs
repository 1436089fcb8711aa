use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linalg::{Factorized, MatKind, Weight};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMethod {
    /// <dx dx^T> / (2 dt). Biased by drift at large dt and by measurement
    /// noise at small dt, but the lowest-variance choice on clean data.
    Simple,
    /// <(dx_k - dx_{k-1})(dx_k - dx_{k-1})^T> / (4 dt). The drift cancels
    /// between consecutive increments, removing the O(dt) bias.
    ThreePoint,
    /// Simple estimate plus the symmetrized lag-one increment covariance,
    /// which cancels the sigma^2/dt measurement-noise bias exactly.
    Vestergaard,
}

/// Grid trajectories compress the diffusion to one scalar per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", rename_all = "snake_case")]
pub enum DiffusionValue<T: Scalar> {
    Matrix(DMatrix<T>),
    Scalar(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DiffusionEstimate<T: Scalar> {
    pub value: DiffusionValue<T>,
    pub method: DiffusionMethod,
    /// The Vestergaard correction can overshoot on short or noise-free
    /// data, leaving a negative eigenvalue. Flagged rather than rejected:
    /// the estimate is still unbiased and often usable.
    pub indefinite: bool,
}

impl<T: Scalar> DiffusionEstimate<T> {
    /// The likelihood weight (4 Dbar)^-1 in the representation matching
    /// the data layout.
    pub(crate) fn weight(&self) -> Result<Weight<T>> {
        match &self.value {
            DiffusionValue::Matrix(d) => {
                let four_d = d * T::of(4.0);
                let inv = Factorized::new(four_d, MatKind::Weight)?.inverse()?;
                // Symmetrize to keep the quadratic forms exact under roundoff.
                let w = (&inv + inv.transpose()) * T::of(0.5);
                Ok(Weight::Dense(w))
            }
            DiffusionValue::Scalar(d) => {
                if *d <= T::zero() || d.not_finite() {
                    return Err(Error::SingularWeight);
                }
                Ok(Weight::Scalar(T::one() / (T::of(4.0) * *d)))
            }
        }
    }

    /// Convenience for scalar estimates; panics on matrix-valued ones.
    pub fn as_scalar(&self) -> T {
        match &self.value {
            DiffusionValue::Scalar(d) => *d,
            DiffusionValue::Matrix(_) => panic!("matrix-valued diffusion estimate"),
        }
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        match &self.value {
            DiffusionValue::Matrix(d) => d,
            DiffusionValue::Scalar(_) => panic!("scalar-valued diffusion estimate"),
        }
    }
}

fn finish<T: Scalar>(
    mut acc: DMatrix<T>,
    rows: usize,
    scale: T,
    method: DiffusionMethod,
) -> DiffusionEstimate<T> {
    acc *= scale / T::from_usize(rows).unwrap();
    let sym = (&acc + acc.transpose()) * T::of(0.5);
    let min_eig = sym
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(T::zero(), T::min);
    DiffusionEstimate {
        indefinite: min_eig < -T::of(1e-12) * sym.amax().max(T::one()),
        value: DiffusionValue::Matrix(sym),
        method,
    }
}

fn need<T: Scalar>(traj: &Trajectory<T>, rows: usize, what: &'static str) -> Result<()> {
    if traj.len() < rows {
        return Err(Error::InsufficientData {
            what,
            needed: rows,
            got: traj.len(),
        });
    }
    Ok(())
}

/// <dx dx^T> / (2 dt) over all increments; the per-component scalar
/// average of the same quantity on grid data.
pub fn diffusion_simple<T: Scalar>(traj: &Trajectory<T>) -> Result<DiffusionEstimate<T>> {
    need(traj, 2, "diffusion estimate")?;
    let d = traj.dim();
    let dt = traj.dt();
    let n_incr = traj.len() - 1;
    if traj.grid().is_some() {
        let mut acc = T::zero();
        for k in 0..n_incr {
            let (x, xn) = (traj.row(k), traj.row(k + 1));
            for a in 0..d {
                let dx = xn[a] - x[a];
                acc += dx * dx;
            }
        }
        let value = acc / (T::of(2.0) * dt * T::from_usize(n_incr * d).unwrap());
        return Ok(DiffusionEstimate {
            indefinite: value < T::zero(),
            value: DiffusionValue::Scalar(value),
            method: DiffusionMethod::Simple,
        });
    }
    let mut acc = DMatrix::zeros(d, d);
    for k in 0..n_incr {
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            let da = xn[a] - x[a];
            for b in 0..d {
                acc[(a, b)] += da * (xn[b] - x[b]);
            }
        }
    }
    Ok(finish(
        acc,
        n_incr,
        T::one() / (T::of(2.0) * dt),
        DiffusionMethod::Simple,
    ))
}

/// Drift-robust estimate from differences of consecutive increments.
pub fn diffusion_three_point<T: Scalar>(traj: &Trajectory<T>) -> Result<DiffusionEstimate<T>> {
    need(traj, 3, "three-point diffusion estimate")?;
    let d = traj.dim();
    let dt = traj.dt();
    let rows = traj.len() - 2;
    let mut delta = vec![T::zero(); d];
    if traj.grid().is_some() {
        let mut acc = T::zero();
        for k in 1..=rows {
            second_difference(traj, k, &mut delta);
            for &v in &delta {
                acc += v * v;
            }
        }
        let value = acc / (T::of(4.0) * dt * T::from_usize(rows * d).unwrap());
        return Ok(DiffusionEstimate {
            indefinite: value < T::zero(),
            value: DiffusionValue::Scalar(value),
            method: DiffusionMethod::ThreePoint,
        });
    }
    let mut acc = DMatrix::zeros(d, d);
    for k in 1..=rows {
        second_difference(traj, k, &mut delta);
        for a in 0..d {
            for b in 0..d {
                acc[(a, b)] += delta[a] * delta[b];
            }
        }
    }
    Ok(finish(
        acc,
        rows,
        T::one() / (T::of(4.0) * dt),
        DiffusionMethod::ThreePoint,
    ))
}

/// Measurement-noise-robust estimate: the simple term plus the symmetrized
/// lag-one cross covariance of increments, whose -sigma^2 expectation
/// cancels the +sigma^2 inflation of the simple term.
pub fn diffusion_vestergaard<T: Scalar>(traj: &Trajectory<T>) -> Result<DiffusionEstimate<T>> {
    need(traj, 3, "noise-robust diffusion estimate")?;
    let d = traj.dim();
    let dt = traj.dt();
    let n_incr = traj.len() - 1;
    let cross_rows = traj.len() - 2;
    let two = T::of(2.0);
    if traj.grid().is_some() {
        let mut same = T::zero();
        let mut cross = T::zero();
        for k in 0..n_incr {
            let (x, xn) = (traj.row(k), traj.row(k + 1));
            for a in 0..d {
                let dx = xn[a] - x[a];
                same += dx * dx;
                if k + 1 < n_incr {
                    cross += dx * (traj.row(k + 2)[a] - xn[a]);
                }
            }
        }
        let value = same / (two * dt * T::from_usize(n_incr * d).unwrap())
            + cross / (dt * T::from_usize(cross_rows * d).unwrap());
        return Ok(DiffusionEstimate {
            indefinite: value < T::zero(),
            value: DiffusionValue::Scalar(value),
            method: DiffusionMethod::Vestergaard,
        });
    }
    let mut same = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(d, d);
    for k in 0..n_incr {
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            let da = xn[a] - x[a];
            for b in 0..d {
                same[(a, b)] += da * (xn[b] - x[b]);
                if k + 1 < n_incr {
                    cross[(a, b)] += da * (traj.row(k + 2)[b] - xn[b]);
                }
            }
        }
    }
    let mut total = same / (two * dt * T::from_usize(n_incr).unwrap());
    let cross_sym = (&cross + cross.transpose()) * T::of(0.5);
    total += cross_sym / (dt * T::from_usize(cross_rows).unwrap());
    // Rows already averaged; reuse finish only for the eigen flag.
    Ok(finish(total, 1, T::one(), DiffusionMethod::Vestergaard))
}

/// delta = (x_{k+1} - x_k) - (x_k - x_{k-1}).
fn second_difference<T: Scalar>(traj: &Trajectory<T>, k: usize, out: &mut [T]) {
    let (pv, cu, nx) = (traj.row(k - 1), traj.row(k), traj.row(k + 1));
    for a in 0..out.len() {
        out[a] = nx[a] - cu[a] - (cu[a] - pv[a]);
    }
}
