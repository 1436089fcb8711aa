use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Reciprocal-condition floor below which a system is treated as singular.
pub(crate) const RCOND_FLOOR: f64 = 1e-12;

/// What the matrix being factorized represents, for error reporting.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum MatKind {
    Gram,
    Weight,
}

pub(crate) struct Factorized<T: Scalar> {
    lu: LU<T, Dyn, Dyn>,
    kind: MatKind,
}

impl<T: Scalar> Factorized<T> {
    /// LU-factorizes `a`, rejecting matrices whose pivot-magnitude ratio
    /// min|u_ii| / max|u_ii| falls below [`RCOND_FLOOR`]. That ratio is a
    /// cheap condition proxy; it catches the exact and near collinearity
    /// this crate produces (duplicate basis effects, frozen trajectories)
    /// without a full condition estimate.
    pub fn new(a: DMatrix<T>, kind: MatKind) -> Result<Self> {
        debug_assert_eq!(a.nrows(), a.ncols());
        debug_assert!(a.nrows() > 0, "empty systems are handled by callers");
        let lu = a.lu();
        let u = lu.u();
        let mut lo = T::max_value().unwrap_or_else(T::one);
        let mut hi = T::zero();
        for i in 0..u.nrows() {
            let p = u[(i, i)].abs();
            lo = lo.min(p);
            hi = hi.max(p);
        }
        if hi == T::zero() || lo / hi < T::of(RCOND_FLOOR) || lo.not_finite() || hi.not_finite() {
            return Err(singular(kind));
        }
        Ok(Factorized { lu, kind })
    }

    pub fn solve(&self, b: &DVector<T>) -> Result<DVector<T>> {
        self.lu.solve(b).ok_or_else(|| singular(self.kind))
    }

    pub fn inverse(&self) -> Result<DMatrix<T>> {
        self.lu.try_inverse().ok_or_else(|| singular(self.kind))
    }
}

fn singular(kind: MatKind) -> Error {
    match kind {
        MatKind::Gram => Error::SingularGram,
        MatKind::Weight => Error::SingularWeight,
    }
}

/// The quadratic weight of the likelihood, (4 Dbar)^-1. Ordinary systems
/// carry a dense d x d matrix; grid systems use one scalar for every cell
/// component, which never gets materialized as a matrix.
#[derive(Debug, Clone)]
pub(crate) enum Weight<T: Scalar> {
    Dense(DMatrix<T>),
    Scalar(T),
}

impl<T: Scalar> Weight<T> {
    /// out = W x. Only meaningful for the dense variant; grid code paths
    /// fold the scalar in directly.
    pub fn mul_into(&self, x: &[T], out: &mut [T]) {
        match self {
            Weight::Dense(w) => {
                for a in 0..w.nrows() {
                    let mut acc = T::zero();
                    for (b, &xb) in x.iter().enumerate() {
                        acc += w[(a, b)] * xb;
                    }
                    out[a] = acc;
                }
            }
            Weight::Scalar(w) => {
                for (o, &xb) in out.iter_mut().zip(x) {
                    *o = *w * xb;
                }
            }
        }
    }

    /// W entry between two components.
    #[inline]
    pub fn entry(&self, a: usize, b: usize) -> T {
        match self {
            Weight::Dense(w) => w[(a, b)],
            Weight::Scalar(w) => {
                if a == b {
                    *w
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn scalar(&self) -> T {
        match self {
            Weight::Scalar(w) => *w,
            Weight::Dense(_) => unreachable!("dense weight on a grid path"),
        }
    }
}

pub(crate) fn sub_matrix<T: Scalar>(m: &DMatrix<T>, pos: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(pos.len(), pos.len(), |i, j| m[(pos[i], pos[j])])
}

pub(crate) fn sub_vector<T: Scalar>(v: &DVector<T>, pos: &[usize]) -> DVector<T> {
    DVector::from_fn(pos.len(), |i, _| v[pos[i]])
}
