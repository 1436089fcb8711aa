//! Basis functions, libraries, and the sparse models built from them.
//!
//! A drift field is expanded as f(x) = sum_i alpha_i b_i(x). Each b_i is a
//! [`BasisFunction`]: for ordinary state vectors, a monomial times a unit
//! vector (`x1 x2^3` driving component 2); for two-field grid states, a
//! reaction monomial `u^i v^j`, optionally multiplied by a spatial derivative
//! of one field, driving one of the two field equations.
//!
//! A [`BasisLibrary`] is an ordered, duplicate-free list of such functions; a
//! [`ModelBasis`] is a strictly increasing set of indices into one. Model
//! selection manipulates `ModelBasis` values only, so the library order is
//! part of any serialized result and is kept deterministic here.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::sde::DriftSpec;
use crate::spde::{apply_field_op, GrayScottParams, GridSpec};

/// Highest total degree a monomial factor may carry. Keeps evaluation well
/// conditioned on the trajectory scales this crate targets.
pub const MAX_TOTAL_DEGREE: u32 = 4;

/// Which of the two fields of a grid state a term reads or drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldId {
    U,
    V,
}

/// Spatial derivative factor of a grid term. All stencils are centered
/// second-order differences on the periodic grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldOp {
    Identity,
    Dx(FieldId),
    Dy(FieldId),
    Dxx(FieldId),
    Dyy(FieldId),
    Laplacian(FieldId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFunction {
    /// `x^exponents` times the unit vector of `component`.
    Monomial { component: usize, exponents: Vec<u8> },
    /// `u^u_pow v^v_pow * op(field)` driving the `target` equation.
    Field {
        target: FieldId,
        u_pow: u8,
        v_pow: u8,
        op: FieldOp,
    },
}

impl BasisFunction {
    pub fn monomial(component: usize, exponents: Vec<u8>) -> Result<Self> {
        let total: u32 = exponents.iter().map(|&e| e as u32).sum();
        if total > MAX_TOTAL_DEGREE {
            return Err(Error::invalid(format!(
                "monomial degree {total} exceeds {MAX_TOTAL_DEGREE}"
            )));
        }
        Ok(BasisFunction::Monomial {
            component,
            exponents,
        })
    }

    pub fn field(target: FieldId, u_pow: u8, v_pow: u8, op: FieldOp) -> Result<Self> {
        if (u_pow + v_pow) as u32 > MAX_TOTAL_DEGREE {
            return Err(Error::invalid(format!(
                "reaction degree {} exceeds {MAX_TOTAL_DEGREE}",
                u_pow + v_pow
            )));
        }
        Ok(BasisFunction::Field {
            target,
            u_pow,
            v_pow,
            op,
        })
    }

    /// Full vector value at an ordinary state: zero except in the driven
    /// component. Grid terms need [`BasisLibrary::eval_field_into`] instead.
    pub fn evaluate<T: Scalar>(&self, x: &[T]) -> Result<DVector<T>> {
        match self {
            BasisFunction::Monomial {
                component,
                exponents,
            } => {
                check_state(x, exponents.len())?;
                let mut v = DVector::zeros(x.len());
                v[*component] = monomial_value(exponents, x);
                Ok(v)
            }
            BasisFunction::Field { .. } => Err(Error::Unsupported {
                reason: "grid term evaluated without a grid".into(),
            }),
        }
    }

    /// Jacobian at an ordinary state: entry (a, b) is the derivative of
    /// component a with respect to x_b. Exactly one row can be non-zero.
    pub fn gradient<T: Scalar>(&self, x: &[T]) -> Result<DMatrix<T>> {
        match self {
            BasisFunction::Monomial {
                component,
                exponents,
            } => {
                check_state(x, exponents.len())?;
                let d = x.len();
                let mut g = DMatrix::zeros(d, d);
                for b in 0..d {
                    g[(*component, b)] = monomial_partial(exponents, x, b);
                }
                Ok(g)
            }
            BasisFunction::Field { .. } => Err(Error::Unsupported {
                reason: "grid term differentiated without a grid".into(),
            }),
        }
    }
}

fn check_state<T>(x: &[T], expected: usize) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "state passed to basis function",
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

#[inline]
fn ipow<T: Scalar>(x: T, e: u8) -> T {
    let mut r = T::one();
    for _ in 0..e {
        r *= x;
    }
    r
}

#[inline]
pub(crate) fn monomial_value<T: Scalar>(exponents: &[u8], x: &[T]) -> T {
    let mut r = T::one();
    for (&e, &xi) in exponents.iter().zip(x) {
        if e > 0 {
            r *= ipow(xi, e);
        }
    }
    r
}

/// d(x^exponents)/dx_b.
#[inline]
pub(crate) fn monomial_partial<T: Scalar>(exponents: &[u8], x: &[T], b: usize) -> T {
    let e = exponents[b];
    if e == 0 {
        return T::zero();
    }
    let mut r = T::from_u8(e).unwrap() * ipow(x[b], e - 1);
    for (j, (&ej, &xj)) in exponents.iter().zip(x).enumerate() {
        if j != b && ej > 0 {
            r *= ipow(xj, ej);
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LibraryKind {
    /// Ordinary d-dimensional states.
    Sde { d: usize },
    /// Two flattened fields on a periodic grid.
    Spde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisLibrary {
    functions: Vec<BasisFunction>,
    kind: LibraryKind,
}

impl BasisLibrary {
    /// Validates homogeneity (all ordinary or all grid terms), per-function
    /// degree bounds, component ranges, and the no-duplicates invariant.
    pub fn new(functions: Vec<BasisFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::invalid("library must contain at least one function"));
        }
        let kind = match &functions[0] {
            BasisFunction::Monomial { exponents, .. } => LibraryKind::Sde { d: exponents.len() },
            BasisFunction::Field { .. } => LibraryKind::Spde,
        };
        for (i, f) in functions.iter().enumerate() {
            match (f, kind) {
                (
                    BasisFunction::Monomial {
                        component,
                        exponents,
                    },
                    LibraryKind::Sde { d },
                ) => {
                    if exponents.len() != d || *component >= d {
                        return Err(Error::invalid(format!(
                            "function {i} does not match state dimension {d}"
                        )));
                    }
                    let total: u32 = exponents.iter().map(|&e| e as u32).sum();
                    if total > MAX_TOTAL_DEGREE {
                        return Err(Error::invalid(format!(
                            "function {i} has degree {total} above {MAX_TOTAL_DEGREE}"
                        )));
                    }
                }
                (BasisFunction::Field { u_pow, v_pow, .. }, LibraryKind::Spde) => {
                    if (*u_pow + *v_pow) as u32 > MAX_TOTAL_DEGREE {
                        return Err(Error::invalid(format!("function {i} degree too high")));
                    }
                }
                _ => {
                    return Err(Error::invalid(
                        "library mixes ordinary and grid basis functions",
                    ))
                }
            }
            if functions[..i].contains(f) {
                return Err(Error::invalid(format!("duplicate basis function at {i}")));
            }
        }
        Ok(BasisLibrary { functions, kind })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn kind(&self) -> LibraryKind {
        self.kind
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn function(&self, idx: usize) -> &BasisFunction {
        &self.functions[idx]
    }

    pub fn index_of(&self, f: &BasisFunction) -> Option<usize> {
        self.functions.iter().position(|g| g == f)
    }

    /// State dimension for ordinary libraries, None for grid libraries.
    pub fn state_dim(&self) -> Option<usize> {
        match self.kind {
            LibraryKind::Sde { d } => Some(d),
            LibraryKind::Spde => None,
        }
    }

    /// (component, scalar value) of term `idx` at an ordinary state.
    #[inline]
    pub fn eval_term<T: Scalar>(&self, idx: usize, x: &[T]) -> (usize, T) {
        match &self.functions[idx] {
            BasisFunction::Monomial {
                component,
                exponents,
            } => (*component, monomial_value(exponents, x)),
            BasisFunction::Field { .. } => unreachable!("grid term in ordinary evaluation"),
        }
    }

    /// Accumulates `alpha . b(x)` over `model` into `out` (length d).
    pub fn drift_into<T: Scalar>(&self, model: &ModelBasis, alpha: &[T], x: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for (&idx, &a) in model.indices().iter().zip(alpha) {
            let (c, v) = self.eval_term(idx, x);
            out[c] += a * v;
        }
    }

    /// Evaluates grid term `idx` over the half of `state` it drives, writing
    /// `grid.cells()` values into `out`. Returns the driven field.
    pub fn eval_field_into<T: Scalar>(
        &self,
        idx: usize,
        state: &[T],
        grid: &GridSpec<T>,
        out: &mut [T],
    ) -> FieldId {
        match &self.functions[idx] {
            BasisFunction::Field {
                target,
                u_pow,
                v_pow,
                op,
            } => {
                let n = grid.cells();
                let (u, v) = state.split_at(n);
                match op {
                    FieldOp::Identity => {
                        for c in 0..n {
                            out[c] = ipow(u[c], *u_pow) * ipow(v[c], *v_pow);
                        }
                    }
                    _ => {
                        apply_field_op(*op, u, v, grid, out);
                        if *u_pow > 0 || *v_pow > 0 {
                            for c in 0..n {
                                out[c] *= ipow(u[c], *u_pow) * ipow(v[c], *v_pow);
                            }
                        }
                    }
                }
                *target
            }
            BasisFunction::Monomial { .. } => unreachable!("ordinary term in grid evaluation"),
        }
    }

    /// Directional derivative of grid term `idx` along the state perturbation
    /// `delta` (full 2-field layout), written over the driven half.
    pub fn field_directional_into<T: Scalar>(
        &self,
        idx: usize,
        state: &[T],
        delta: &[T],
        grid: &GridSpec<T>,
        out: &mut [T],
    ) -> FieldId {
        match &self.functions[idx] {
            BasisFunction::Field {
                target,
                u_pow,
                v_pow,
                op,
            } => {
                let n = grid.cells();
                let (u, v) = state.split_at(n);
                let (du, dv) = delta.split_at(n);
                // (grad b . delta)_c = dm_c * (op w)_c + m_c * (op dw)_c, with
                // m = u^p v^q and dm its chain-rule derivative along delta.
                match op {
                    FieldOp::Identity => {
                        for c in 0..n {
                            out[c] = monomial_chain(u[c], v[c], *u_pow, *v_pow, du[c], dv[c]);
                        }
                    }
                    _ => {
                        apply_field_op(*op, u, v, grid, out);
                        let mut op_delta = vec![T::zero(); n];
                        apply_field_op(*op, du, dv, grid, &mut op_delta);
                        for c in 0..n {
                            let m = ipow(u[c], *u_pow) * ipow(v[c], *v_pow);
                            let dm = monomial_chain(u[c], v[c], *u_pow, *v_pow, du[c], dv[c]);
                            out[c] = dm * out[c] + m * op_delta[c];
                        }
                    }
                }
                *target
            }
            BasisFunction::Monomial { .. } => unreachable!("ordinary term in grid evaluation"),
        }
    }
}

/// d(u^p v^q) along (du, dv).
#[inline]
fn monomial_chain<T: Scalar>(u: T, v: T, p: u8, q: u8, du: T, dv: T) -> T {
    let mut r = T::zero();
    if p > 0 {
        r += T::from_u8(p).unwrap() * ipow(u, p - 1) * ipow(v, q) * du;
    }
    if q > 0 {
        r += T::from_u8(q).unwrap() * ipow(u, p) * ipow(v, q - 1) * dv;
    }
    r
}

/// Strictly increasing set of indices into a library.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ModelBasis {
    indices: Vec<usize>,
}

impl ModelBasis {
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("model contains a repeated index"));
        }
        Ok(ModelBasis { indices })
    }

    pub fn empty() -> Self {
        ModelBasis::default()
    }

    /// All of `0..n`.
    pub fn full(n: usize) -> Self {
        ModelBasis {
            indices: (0..n).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    /// Copy with `idx` added or removed.
    pub fn toggled(&self, idx: usize) -> Self {
        let mut indices = self.indices.clone();
        match indices.binary_search(&idx) {
            Ok(pos) => {
                indices.remove(pos);
            }
            Err(pos) => indices.insert(pos, idx),
        }
        ModelBasis { indices }
    }

    pub fn intersection_size(&self, other: &Self) -> usize {
        self.indices.iter().filter(|i| other.contains(**i)).count()
    }

    pub fn union_size(&self, other: &Self) -> usize {
        self.len() + other.len() - self.intersection_size(other)
    }
}

impl FromIterator<usize> for ModelBasis {
    /// Convenience for literal sets; panics on duplicates.
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        ModelBasis::new(iter.into_iter().collect()).expect("duplicate index")
    }
}

/// All monomials of total degree at most `max_degree` in d variables, each
/// driving each component. Ordered by degree, then lexicographically by
/// exponent vector, with the driven component innermost. Size is
/// d * C(d + max_degree, max_degree).
pub fn polynomial_library(d: usize, max_degree: u32) -> Result<BasisLibrary> {
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if max_degree > MAX_TOTAL_DEGREE {
        return Err(Error::invalid(format!(
            "degree {max_degree} above {MAX_TOTAL_DEGREE}"
        )));
    }
    let mut functions = Vec::new();
    for degree in 0..=max_degree {
        for exponents in compositions(d, degree) {
            for component in 0..d {
                functions.push(BasisFunction::Monomial {
                    component,
                    exponents: exponents.clone(),
                });
            }
        }
    }
    BasisLibrary::new(functions)
}

/// Exponent vectors of total degree exactly `total`, lexicographically
/// ascending.
fn compositions(d: usize, total: u32) -> Vec<Vec<u8>> {
    fn rec(d: usize, total: u32, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if d == 1 {
            prefix.push(total as u8);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first as u8);
            rec(d - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, total, &mut Vec::new(), &mut out);
    out
}

/// The d + d^2 functions of a competitive population model: per-capita terms
/// `x_i e_i`, then all pairwise interactions `x_i x_j e_i` (i outer, j
/// inner, including j = i).
pub fn lv_library(d: usize) -> Result<BasisLibrary> {
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let mut functions = Vec::with_capacity(d + d * d);
    for i in 0..d {
        let mut e = vec![0u8; d];
        e[i] = 1;
        functions.push(BasisFunction::Monomial {
            component: i,
            exponents: e,
        });
    }
    for i in 0..d {
        for j in 0..d {
            let mut e = vec![0u8; d];
            e[i] += 1;
            e[j] += 1;
            functions.push(BasisFunction::Monomial {
                component: i,
                exponents: e,
            });
        }
    }
    BasisLibrary::new(functions)
}

/// 78-term library for two-field reaction-diffusion states. Per driven
/// equation (u block first, then v): the 15 reaction monomials u^i v^j with
/// i + j <= 4 ordered by degree then (i, j); then m * op(w) for m in
/// {1, u, v, uv}, op in {Laplacian, d/dx, d/dy}, w in {u, v}.
pub fn gray_scott_library() -> BasisLibrary {
    let mut functions = Vec::with_capacity(78);
    for target in [FieldId::U, FieldId::V] {
        for degree in 0..=4u8 {
            for i in 0..=degree {
                functions.push(BasisFunction::Field {
                    target,
                    u_pow: i,
                    v_pow: degree - i,
                    op: FieldOp::Identity,
                });
            }
        }
        let ops: [fn(FieldId) -> FieldOp; 3] = [FieldOp::Laplacian, FieldOp::Dx, FieldOp::Dy];
        for (u_pow, v_pow) in [(0u8, 0u8), (1, 0), (0, 1), (1, 1)] {
            for make in ops {
                for operand in [FieldId::U, FieldId::V] {
                    functions.push(BasisFunction::Field {
                        target,
                        u_pow,
                        v_pow,
                        op: make(operand),
                    });
                }
            }
        }
    }
    BasisLibrary::new(functions).expect("fixed library is valid")
}

/// Expresses the exact drift of a generating process in `library`,
/// returning the minimal model and its coefficients in model order.
pub fn true_model<T: Scalar>(
    drift: &DriftSpec<T>,
    library: &BasisLibrary,
) -> Result<(ModelBasis, Vec<T>)> {
    let terms = drift_terms(drift)?;
    resolve_terms(terms, library)
}

/// Minimal model of the stochastic reaction-diffusion benchmark: per u
/// equation `F - F u - u v^2 + Du lap u`, per v equation
/// `-(F + k) v + u v^2 + Dv lap v`.
pub fn gray_scott_true_model<T: Scalar>(
    params: &GrayScottParams<T>,
    library: &BasisLibrary,
) -> Result<(ModelBasis, Vec<T>)> {
    use BasisFunction::Field;
    use FieldId::{U, V};
    let terms = vec![
        (
            Field {
                target: U,
                u_pow: 0,
                v_pow: 0,
                op: FieldOp::Identity,
            },
            params.f,
        ),
        (
            Field {
                target: U,
                u_pow: 1,
                v_pow: 0,
                op: FieldOp::Identity,
            },
            -params.f,
        ),
        (
            Field {
                target: U,
                u_pow: 1,
                v_pow: 2,
                op: FieldOp::Identity,
            },
            -T::one(),
        ),
        (
            Field {
                target: U,
                u_pow: 0,
                v_pow: 0,
                op: FieldOp::Laplacian(U),
            },
            params.du,
        ),
        (
            Field {
                target: V,
                u_pow: 0,
                v_pow: 1,
                op: FieldOp::Identity,
            },
            -(params.f + params.k),
        ),
        (
            Field {
                target: V,
                u_pow: 1,
                v_pow: 2,
                op: FieldOp::Identity,
            },
            T::one(),
        ),
        (
            Field {
                target: V,
                u_pow: 0,
                v_pow: 0,
                op: FieldOp::Laplacian(V),
            },
            params.dv,
        ),
    ];
    resolve_terms(terms, library)
}

fn resolve_terms<T: Scalar>(
    terms: Vec<(BasisFunction, T)>,
    library: &BasisLibrary,
) -> Result<(ModelBasis, Vec<T>)> {
    let mut pairs = Vec::with_capacity(terms.len());
    for (f, coeff) in terms {
        let idx = library.index_of(&f).ok_or_else(|| Error::NotRepresentable {
            reason: format!("library lacks {f:?}"),
        })?;
        pairs.push((idx, coeff));
    }
    pairs.sort_by_key(|&(idx, _)| idx);
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::NotRepresentable {
            reason: "drift maps two terms onto one library function".into(),
        });
    }
    let model = ModelBasis::new(pairs.iter().map(|&(i, _)| i).collect())?;
    let alpha = pairs.into_iter().map(|(_, c)| c).collect();
    Ok((model, alpha))
}

fn drift_terms<T: Scalar>(drift: &DriftSpec<T>) -> Result<Vec<(BasisFunction, T)>> {
    let mono = |component: usize, exponents: Vec<u8>| BasisFunction::Monomial {
        component,
        exponents,
    };
    let unit = |d: usize, j: usize| {
        let mut e = vec![0u8; d];
        e[j] = 1;
        e
    };
    match drift {
        DriftSpec::Lorenz { sigma, rho, beta } => {
            // f = (sigma (x3 - x1), x1 x3 - beta x2, x1 (rho - x2) - x3).
            Ok(vec![
                (mono(0, unit(3, 0)), -*sigma),
                (mono(0, unit(3, 2)), *sigma),
                (mono(1, vec![1, 0, 1]), T::one()),
                (mono(1, unit(3, 1)), -*beta),
                (mono(2, unit(3, 0)), *rho),
                (mono(2, vec![1, 1, 0]), -T::one()),
                (mono(2, unit(3, 2)), -T::one()),
            ])
        }
        DriftSpec::Ou { a } => {
            let d = a.nrows();
            let mut terms = Vec::new();
            for i in 0..d {
                for j in 0..d {
                    if a[(i, j)] != T::zero() {
                        terms.push((mono(i, unit(d, j)), -a[(i, j)]));
                    }
                }
            }
            Ok(terms)
        }
        DriftSpec::LotkaVolterra { r, a } => {
            let d = r.len();
            let mut terms = Vec::new();
            for i in 0..d {
                if r[i] != T::zero() {
                    terms.push((mono(i, unit(d, i)), r[i]));
                }
                for j in 0..d {
                    if a[(i, j)] != T::zero() {
                        let mut e = vec![0u8; d];
                        e[i] += 1;
                        e[j] += 1;
                        terms.push((mono(i, e), -a[(i, j)]));
                    }
                }
            }
            Ok(terms)
        }
        DriftSpec::Linear { library, alpha } => {
            let mut terms = Vec::new();
            for (f, &c) in library.functions().iter().zip(alpha.iter()) {
                if c != T::zero() {
                    terms.push((f.clone(), c));
                }
            }
            Ok(terms)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::systems;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn polynomial_library_sizes() {
        assert_eq!(polynomial_library(3, 2).unwrap().len(), 30);
        assert_eq!(polynomial_library(10, 1).unwrap().len(), 110);
        assert_eq!(polynomial_library(3, 1).unwrap().len(), 12);
        assert_eq!(polynomial_library(1, 4).unwrap().len(), 5);
        assert!(polynomial_library(3, 5).is_err());
        assert!(polynomial_library(0, 2).is_err());
    }

    #[test]
    fn polynomial_library_order_is_graded_lex() {
        let lib = polynomial_library(2, 2).unwrap();
        let expected: Vec<(usize, Vec<u8>)> = vec![
            (0, vec![0, 0]),
            (1, vec![0, 0]),
            (0, vec![0, 1]),
            (1, vec![0, 1]),
            (0, vec![1, 0]),
            (1, vec![1, 0]),
            (0, vec![0, 2]),
            (1, vec![0, 2]),
            (0, vec![1, 1]),
            (1, vec![1, 1]),
            (0, vec![2, 0]),
            (1, vec![2, 0]),
        ];
        for (f, (c, e)) in lib.functions().iter().zip(expected) {
            match f {
                BasisFunction::Monomial {
                    component,
                    exponents,
                } => {
                    assert_eq!(*component, c);
                    assert_eq!(*exponents, e);
                }
                _ => panic!(),
            }
        }
    }

    #[test]
    fn lv_library_size_and_content() {
        let lib = lv_library(7).unwrap();
        assert_eq!(lib.len(), 56);
        // x_3 x_5 e_3 sits at 7 + 3*7 + 5.
        match lib.function(7 + 3 * 7 + 5) {
            BasisFunction::Monomial {
                component,
                exponents,
            } => {
                assert_eq!(*component, 3);
                let mut e = vec![0u8; 7];
                e[3] = 1;
                e[5] = 1;
                assert_eq!(*exponents, e);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn evaluate_monomial_example() {
        // x1 x2 driving the first component at (2, 3) gives (6, 0).
        let f = BasisFunction::monomial(0, vec![1, 1]).unwrap();
        let v = f.evaluate(&[2.0, 3.0]).unwrap();
        assert_eq!(v, DVector::from_vec(vec![6.0, 0.0]));
        assert!(f.evaluate(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn degree_cap_enforced() {
        assert!(BasisFunction::monomial(0, vec![2, 3]).is_err());
        assert!(BasisFunction::monomial(0, vec![2, 2]).is_ok());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = BasisFunction::monomial(1, vec![2, 1, 0]).unwrap();
        let x = [1.3f64, -0.7, 2.1];
        let g = f.gradient(&x).unwrap();
        let h = 1e-5;
        for b in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[b] += h;
            xm[b] -= h;
            let fd = (f.evaluate(&xp).unwrap() - f.evaluate(&xm).unwrap()) / (2.0 * h);
            for a in 0..3 {
                assert!(
                    (g[(a, b)] - fd[a]).abs() < 1e-6,
                    "partial ({a},{b}): {} vs {}",
                    g[(a, b)],
                    fd[a]
                );
            }
        }
    }

    #[test]
    fn library_rejects_duplicates_and_mixtures() {
        let f = BasisFunction::monomial(0, vec![1]).unwrap();
        assert!(BasisLibrary::new(vec![f.clone(), f.clone()]).is_err());
        let g = BasisFunction::field(FieldId::U, 0, 0, FieldOp::Identity).unwrap();
        assert!(BasisLibrary::new(vec![f, g]).is_err());
    }

    #[test]
    fn model_basis_invariants() {
        let m = ModelBasis::new(vec![5, 1, 3]).unwrap();
        assert_eq!(m.indices(), &[1, 3, 5]);
        assert!(ModelBasis::new(vec![2, 2]).is_err());
        assert!(m.contains(3));
        assert!(!m.contains(2));
        assert_eq!(m.toggled(3).indices(), &[1, 5]);
        assert_eq!(m.toggled(2).indices(), &[1, 2, 3, 5]);
        let t: ModelBasis = [0, 4].into_iter().collect();
        assert_eq!(m.union_size(&t), 5);
        assert_eq!(m.intersection_size(&t), 0);
    }

    #[test]
    fn lorenz_true_model() {
        let (drift, _, _) = systems::lorenz::<f64>();
        let lib = polynomial_library(3, 2).unwrap();
        let (model, alpha) = true_model(&drift, &lib).unwrap();
        assert_eq!(model.indices(), &[3, 5, 7, 9, 11, 22, 26]);
        let expected = [10.0, -1.0, -8.0 / 3.0, -10.0, 28.0, 1.0, -1.0];
        for (a, e) in alpha.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn true_models_reproduce_the_drift() {
        // Evaluated as sum alpha_i b_i at random states, each resolved model
        // must match its generating field to near machine precision.
        let cases: Vec<(DriftSpec<f64>, crate::sde::NoiseSpec<f64>, Vec<f64>)> =
            vec![systems::lorenz(), systems::ou10(), systems::lv7()];
        let mut rng_state = 88172645463325252u64;
        let mut next = move || {
            // xorshift is plenty for scattering test points.
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for (drift, _, x0) in cases {
            let d = x0.len();
            let lib = if d == 7 {
                lv_library(7).unwrap()
            } else {
                polynomial_library(d, 2).unwrap()
            };
            let (model, alpha) = true_model(&drift, &lib).unwrap();
            let mut fhat = vec![0.0; d];
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| 2.0 * next()).collect();
                lib.drift_into(&model, &alpha, &x, &mut fhat);
                let f = drift.eval(&x);
                for c in 0..d {
                    assert!(
                        (fhat[c] - f[c]).abs() <= 1e-12 * (1.0 + f[c].abs()),
                        "component {c}: {} vs {}",
                        fhat[c],
                        f[c]
                    );
                }
            }
        }
    }

    #[test]
    fn ou10_has_19_terms_lv7_has_32() {
        let (ou, _, _) = systems::ou10::<f64>();
        let lib = polynomial_library(10, 1).unwrap();
        let (model, _) = true_model(&ou, &lib).unwrap();
        assert_eq!(model.len(), 19);

        let (lv, _, _) = systems::lv7::<f64>();
        let lib = lv_library(7).unwrap();
        let (model, _) = true_model(&lv, &lib).unwrap();
        assert_eq!(model.len(), 32);
    }

    #[test]
    fn not_representable_in_too_small_library() {
        let (drift, _, _) = systems::lorenz::<f64>();
        let lib = polynomial_library(3, 1).unwrap();
        assert!(matches!(
            true_model(&drift, &lib),
            Err(Error::NotRepresentable { .. })
        ));
    }

    #[test]
    fn gray_scott_library_composition() {
        let lib = gray_scott_library();
        assert_eq!(lib.len(), 78);
        let params = GrayScottParams::<f64>::paper();
        let (model, alpha) = gray_scott_true_model(&params, &lib).unwrap();
        assert_eq!(model.indices(), &[0, 2, 7, 15, 40, 46, 55]);
        let expected = [
            params.f,
            -params.f,
            -1.0,
            params.du,
            -(params.f + params.k),
            1.0,
            params.dv,
        ];
        for (a, e) in alpha.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn ou_true_model_is_minus_a() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let drift = DriftSpec::Ou { a };
        let lib = polynomial_library(2, 1).unwrap();
        let (model, alpha) = true_model(&drift, &lib).unwrap();
        assert_eq!(model.len(), 3);
        // Library order: const e0, const e1, x2 e0, x2 e1, x1 e0, x1 e1.
        assert_eq!(model.indices(), &[2, 3, 4]);
        assert_eq!(alpha, vec![-0.5, -2.0, -1.0]);
    }

    #[test]
    fn linear_drift_true_model_round_trip() {
        let lib = polynomial_library(2, 2).unwrap();
        let mut alpha = vec![0.0; lib.len()];
        alpha[3] = 1.5;
        alpha[8] = -0.25;
        let drift = DriftSpec::Linear {
            library: lib.clone(),
            alpha: alpha.clone(),
        };
        let (model, coeffs) = true_model(&drift, &lib).unwrap();
        assert_eq!(model.indices(), &[3, 8]);
        assert_eq!(coeffs, vec![1.5, -0.25]);
    }

    #[test]
    fn library_json_round_trip() {
        let lib = gray_scott_library();
        let text = serde_json::to_string(&lib).unwrap();
        let back: BasisLibrary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lib);

        let lib = polynomial_library(3, 2).unwrap();
        let text = serde_json::to_string(&lib).unwrap();
        let back: BasisLibrary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lib);
    }
}
