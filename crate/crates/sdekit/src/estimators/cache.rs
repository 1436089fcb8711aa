use nalgebra::{DMatrix, DVector};

use super::diffusion::{
    diffusion_simple, diffusion_three_point, diffusion_vestergaard, DiffusionEstimate,
};
use super::linalg::{sub_matrix, sub_vector, Factorized, MatKind, Weight};
use crate::basis::{
    monomial_partial, monomial_value, BasisFunction, BasisLibrary, FieldId, ModelBasis,
};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::spde::GridSpec;
use crate::trajectory::Trajectory;

/// Row filtering and weighting knobs for cache construction. Rows are
/// addressed by increment index: row k covers the step from state k to
/// state k + 1. Estimators that read several consecutive states keep a
/// row only when every increment it touches survives the filter, so an
/// excluded block never leaks into a training fit.
#[derive(Clone, Default)]
pub(crate) struct BuildOpts<T: Scalar> {
    /// Keep only increments in [start, end).
    pub rows: Option<(usize, usize)>,
    /// Drop increments in [start, end); applied after `rows`.
    pub exclude: Option<(usize, usize)>,
    /// Replace the trajectory-derived weight, e.g. so that
    /// cross-validation folds share one weight.
    pub weight: Option<(Weight<T>, DiffusionEstimate<T>)>,
}

impl<T: Scalar> BuildOpts<T> {
    fn keeps(&self, k: usize) -> bool {
        if let Some((s, e)) = self.rows {
            if k < s || k >= e {
                return false;
            }
        }
        if let Some((s, e)) = self.exclude {
            if k >= s && k < e {
                return false;
            }
        }
        true
    }
}

/// Moment matrices of one estimator family over one trajectory.
enum Kind<T: Scalar> {
    /// Left-endpoint regression: Y_i = <b_i^T W v>, G_ij = <b_i^T W b_j>.
    Aml {
        y: DVector<T>,
        g: DMatrix<T>,
        q0: T,
    },
    /// Midpoint regression with left-endpoint instruments plus the linear
    /// likelihood correction from the instantaneous diffusion estimate.
    Trapeze {
        y: DVector<T>,
        g_fit: DMatrix<T>,
        y_mid: DVector<T>,
        g_mm: DMatrix<T>,
        corr: DVector<T>,
        q0: T,
    },
    /// Lagged-endpoint regression: instruments one observation behind the
    /// increment so independent measurement noise cannot correlate them.
    Shift {
        y: DVector<T>,
        g_fit: DMatrix<T>,
        g_quad: DMatrix<T>,
        q0: T,
    },
}

/// Precomputed sufficient statistics for fitting and scoring sub-models
/// of a basis library on one trajectory.
///
/// Building the cache costs one pass over the data; afterwards every
/// sub-model fit reduces to extracting a small submatrix and solving it,
/// which is what makes combinatorial model search affordable.
pub struct FitCache<T: Scalar> {
    kind: Kind<T>,
    /// Library indices the matrices cover, ascending.
    indices: Vec<usize>,
    tau: T,
    dt: T,
    n_rows: usize,
    n_library: usize,
    diffusion: DiffusionEstimate<T>,
}

/// Coefficients and quasi log-likelihood of one scored sub-model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFit<T: Scalar> {
    /// One coefficient per model index, in model order.
    pub coefficients: Vec<T>,
    pub log_likelihood: T,
}

impl<T: Scalar> FitCache<T> {
    /// Left-endpoint moments under the plain diffusion weight.
    pub fn aml(traj: &Trajectory<T>, library: &BasisLibrary) -> Result<Self> {
        Self::build_aml(traj, library, None, BuildOpts::default())
    }

    /// Midpoint moments under the drift-debiased diffusion weight.
    pub fn trapeze(traj: &Trajectory<T>, library: &BasisLibrary) -> Result<Self> {
        Self::build_trapeze(traj, library, None, BuildOpts::default())
    }

    /// Lagged moments under the measurement-noise-robust diffusion weight.
    pub fn shift(traj: &Trajectory<T>, library: &BasisLibrary) -> Result<Self> {
        Self::build_shift(traj, library, None, BuildOpts::default())
    }

    pub(crate) fn build_aml(
        traj: &Trajectory<T>,
        library: &BasisLibrary,
        subset: Option<&ModelBasis>,
        opts: BuildOpts<T>,
    ) -> Result<Self> {
        let indices = covered(library, subset);
        check_shape(traj, library, 2, "left-endpoint fit")?;
        let (weight, diffusion) = resolve_weight(traj, &opts, diffusion_simple)?;
        let stats = match library.state_dim() {
            Some(_) => sde_aml(traj, library, &indices, &weight, &opts)?,
            None => spde_aml(traj, library, &indices, &weight, &opts)?,
        };
        Ok(stats.into_cache(indices, library.len(), traj.dt(), diffusion))
    }

    pub(crate) fn build_trapeze(
        traj: &Trajectory<T>,
        library: &BasisLibrary,
        subset: Option<&ModelBasis>,
        opts: BuildOpts<T>,
    ) -> Result<Self> {
        let indices = covered(library, subset);
        check_shape(traj, library, 3, "midpoint fit")?;
        let (weight, diffusion) = resolve_weight(traj, &opts, diffusion_three_point)?;
        let stats = match library.state_dim() {
            Some(_) => sde_trapeze(traj, library, &indices, &weight, &opts)?,
            None => spde_trapeze(traj, library, &indices, &weight, &opts)?,
        };
        Ok(stats.into_cache(indices, library.len(), traj.dt(), diffusion))
    }

    pub(crate) fn build_shift(
        traj: &Trajectory<T>,
        library: &BasisLibrary,
        subset: Option<&ModelBasis>,
        opts: BuildOpts<T>,
    ) -> Result<Self> {
        let indices = covered(library, subset);
        check_shape(traj, library, 3, "lagged fit")?;
        let (weight, diffusion) = resolve_weight(traj, &opts, diffusion_vestergaard)?;
        let stats = match library.state_dim() {
            Some(_) => sde_shift(traj, library, &indices, &weight, &opts)?,
            None => spde_shift(traj, library, &indices, &weight, &opts)?,
        };
        Ok(stats.into_cache(indices, library.len(), traj.dt(), diffusion))
    }

    /// Total observation time tau = n_rows * dt entering every likelihood.
    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Number of transition rows behind the moment averages.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Size of the library the cache was built against.
    pub fn n_library(&self) -> usize {
        self.n_library
    }

    pub fn diffusion(&self) -> &DiffusionEstimate<T> {
        &self.diffusion
    }

    /// Log-likelihood of the empty model (pure diffusion, zero drift).
    pub fn log_likelihood_empty(&self) -> T {
        -self.tau * self.q0()
    }

    /// Fits `model` by solving its sub-system and scores it with the
    /// estimator family's own log-likelihood.
    pub fn score(&self, model: &ModelBasis) -> Result<ScoredFit<T>> {
        if model.is_empty() {
            return Ok(ScoredFit {
                coefficients: Vec::new(),
                log_likelihood: self.log_likelihood_empty(),
            });
        }
        let pos = self.positions(model)?;
        let (g_fit, y) = self.fit_system();
        let f = Factorized::new(sub_matrix(g_fit, &pos), MatKind::Gram)?;
        let alpha = f.solve(&sub_vector(y, &pos))?;
        let ll = self.log_likelihood_at(&pos, &alpha);
        Ok(ScoredFit {
            coefficients: alpha.iter().cloned().collect(),
            log_likelihood: ll,
        })
    }

    /// Log-likelihood of `model` at externally supplied coefficients.
    pub fn evaluate(&self, model: &ModelBasis, alpha: &[T]) -> Result<T> {
        if alpha.len() != model.len() {
            return Err(Error::DimensionMismatch {
                what: "coefficients for model",
                expected: model.len(),
                got: alpha.len(),
            });
        }
        let pos = self.positions(model)?;
        Ok(self.log_likelihood_at(&pos, &DVector::from_row_slice(alpha)))
    }

    /// The regression matrix of `model`, i.e. the sub-Gram the fit solves.
    pub fn model_gram(&self, model: &ModelBasis) -> Result<DMatrix<T>> {
        let pos = self.positions(model)?;
        Ok(sub_matrix(self.fit_system().0, &pos))
    }

    fn q0(&self) -> T {
        match &self.kind {
            Kind::Aml { q0, .. } | Kind::Trapeze { q0, .. } | Kind::Shift { q0, .. } => *q0,
        }
    }

    fn fit_system(&self) -> (&DMatrix<T>, &DVector<T>) {
        match &self.kind {
            Kind::Aml { g, y, .. } => (g, y),
            Kind::Trapeze { g_fit, y, .. } => (g_fit, y),
            Kind::Shift { g_fit, y, .. } => (g_fit, y),
        }
    }

    /// Maps model indices to positions in this cache's coverage.
    fn positions(&self, model: &ModelBasis) -> Result<Vec<usize>> {
        model
            .indices()
            .iter()
            .map(|&idx| {
                self.indices.binary_search(&idx).map_err(|_| {
                    Error::invalid(format!("model uses index {idx} outside the cached set"))
                })
            })
            .collect()
    }

    /// The family's log-likelihood at coefficients over cached positions.
    fn log_likelihood_at(&self, pos: &[usize], alpha: &DVector<T>) -> T {
        let two = T::of(2.0);
        match &self.kind {
            Kind::Aml { y, g, q0 } => {
                let ys = sub_vector(y, pos);
                let gs = sub_matrix(g, pos);
                -self.tau * (*q0 - two * ys.dot(alpha) + alpha.dot(&(&gs * alpha)))
            }
            Kind::Trapeze {
                y_mid,
                g_mm,
                corr,
                q0,
                ..
            } => {
                let ys = sub_vector(y_mid, pos);
                let gs = sub_matrix(g_mm, pos);
                let cs = sub_vector(corr, pos);
                -self.tau * (*q0 - two * ys.dot(alpha) + alpha.dot(&(&gs * alpha)))
                    - self.tau / two * cs.dot(alpha)
            }
            Kind::Shift { y, g_quad, q0, .. } => {
                let ys = sub_vector(y, pos);
                let gs = sub_matrix(g_quad, pos);
                -self.tau * (*q0 - two * ys.dot(alpha) + alpha.dot(&(&gs * alpha)))
            }
        }
    }
}

fn covered(library: &BasisLibrary, subset: Option<&ModelBasis>) -> Vec<usize> {
    match subset {
        Some(m) => m.indices().to_vec(),
        None => (0..library.len()).collect(),
    }
}

fn resolve_weight<T: Scalar>(
    traj: &Trajectory<T>,
    opts: &BuildOpts<T>,
    default: fn(&Trajectory<T>) -> Result<DiffusionEstimate<T>>,
) -> Result<(Weight<T>, DiffusionEstimate<T>)> {
    match &opts.weight {
        Some((w, d)) => Ok((w.clone(), d.clone())),
        None => {
            let est = default(traj)?;
            let w = est.weight()?;
            Ok((w, est))
        }
    }
}

fn check_shape<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    min_states: usize,
    what: &'static str,
) -> Result<()> {
    if traj.len() < min_states {
        return Err(Error::InsufficientData {
            what,
            needed: min_states,
            got: traj.len(),
        });
    }
    match library.state_dim() {
        Some(d) => {
            if traj.dim() != d {
                return Err(Error::DimensionMismatch {
                    what: "trajectory dimension for library",
                    expected: d,
                    got: traj.dim(),
                });
            }
        }
        None => {
            let grid = traj.grid().ok_or_else(|| Error::Unsupported {
                reason: "grid library applied to a trajectory without grid metadata".into(),
            })?;
            if traj.dim() != 2 * grid.cells() {
                return Err(Error::DimensionMismatch {
                    what: "grid trajectory dimension",
                    expected: 2 * grid.cells(),
                    got: traj.dim(),
                });
            }
        }
    }
    Ok(())
}

/// Raw accumulated moments, before assembly into a [`FitCache`].
struct Stats<T: Scalar> {
    kind: Kind<T>,
    n_rows: usize,
}

impl<T: Scalar> Stats<T> {
    fn into_cache(
        self,
        indices: Vec<usize>,
        n_library: usize,
        dt: T,
        diffusion: DiffusionEstimate<T>,
    ) -> FitCache<T> {
        FitCache {
            tau: T::from_usize(self.n_rows).unwrap() * dt,
            kind: self.kind,
            indices,
            dt,
            n_rows: self.n_rows,
            n_library,
            diffusion,
        }
    }
}

fn no_rows<T>(what: &'static str) -> Result<T> {
    Err(Error::InsufficientData {
        what,
        needed: 1,
        got: 0,
    })
}

/// Distinct monomials of a library subset plus, per covered function, its
/// (monomial position, driven component) pair. Collapsing duplicates lets
/// the accumulation run over P distinct monomials instead of all n_B
/// functions; libraries here reuse each monomial across d components.
struct SdeDesign {
    exps: Vec<Vec<u8>>,
    fpos: Vec<(usize, usize)>,
}

impl SdeDesign {
    fn new(library: &BasisLibrary, indices: &[usize]) -> Self {
        let mut exps: Vec<Vec<u8>> = Vec::new();
        let mut fpos = Vec::with_capacity(indices.len());
        for &idx in indices {
            match library.function(idx) {
                BasisFunction::Monomial {
                    component,
                    exponents,
                } => {
                    let p = match exps.iter().position(|e| e == exponents) {
                        Some(p) => p,
                        None => {
                            exps.push(exponents.clone());
                            exps.len() - 1
                        }
                    };
                    fpos.push((p, *component));
                }
                BasisFunction::Field { .. } => unreachable!("field term in ordinary design"),
            }
        }
        SdeDesign { exps, fpos }
    }

    /// out[p] = grad(m_p)(x) . delta.
    fn eval_grad_dot<T: Scalar>(&self, x: &[T], delta: &[T], out: &mut [T]) {
        for (o, e) in out.iter_mut().zip(&self.exps) {
            let mut acc = T::zero();
            for (b, &db) in delta.iter().enumerate() {
                if e[b] > 0 {
                    acc += monomial_partial(e, x, b) * db;
                }
            }
            *o = acc;
        }
    }

    /// Projects monomial moments down to function moments:
    /// out_ij = W[c_i, c_j] * m[p_i, p_j] * scale.
    fn assemble_gram<T: Scalar>(&self, m: &DMatrix<T>, weight: &Weight<T>, scale: T) -> DMatrix<T> {
        let n = self.fpos.len();
        DMatrix::from_fn(n, n, |i, j| {
            let (pi, ci) = self.fpos[i];
            let (pj, cj) = self.fpos[j];
            weight.entry(ci, cj) * m[(pi, pj)] * scale
        })
    }

    /// out_i = m[p_i, c_i] * scale for per-component moment tables.
    fn assemble_vector<T: Scalar>(&self, m: &DMatrix<T>, scale: T) -> DVector<T> {
        DVector::from_fn(self.fpos.len(), |i, _| {
            let (pi, ci) = self.fpos[i];
            m[(pi, ci)] * scale
        })
    }
}

fn mirror_upper<T: Scalar>(m: &mut DMatrix<T>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
}

fn sde_aml<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let design = SdeDesign::new(library, indices);
    let (p, d, dt) = (design.exps.len(), traj.dim(), traj.dt());
    let mut m_acc = DMatrix::<T>::zeros(p, p);
    let mut y_acc = DMatrix::<T>::zeros(p, d);
    let mut q0_acc = T::zero();
    let mut rows = 0usize;
    let mut mono = vec![T::zero(); p];
    let mut v = vec![T::zero(); d];
    let mut wv = vec![T::zero(); d];
    for k in 0..traj.len() - 1 {
        if !opts.keeps(k) {
            continue;
        }
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        weight.mul_into(&v, &mut wv);
        design_eval(&design, x, &mut mono);
        for i in 0..p {
            let mi = mono[i];
            for j in i..p {
                m_acc[(i, j)] += mi * mono[j];
            }
        }
        for (i, &mi) in mono.iter().enumerate() {
            for a in 0..d {
                y_acc[(i, a)] += mi * wv[a];
            }
        }
        for a in 0..d {
            q0_acc += v[a] * wv[a];
        }
        rows += 1;
    }
    if rows == 0 {
        return no_rows("left-endpoint fit rows");
    }
    mirror_upper(&mut m_acc);
    let scale = T::one() / T::from_usize(rows).unwrap();
    Ok(Stats {
        kind: Kind::Aml {
            y: design.assemble_vector(&y_acc, scale),
            g: design.assemble_gram(&m_acc, weight, scale),
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}

fn design_eval<T: Scalar>(design: &SdeDesign, x: &[T], out: &mut [T]) {
    for (o, e) in out.iter_mut().zip(&design.exps) {
        *o = monomial_value(e, x);
    }
}

fn sde_trapeze<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let design = SdeDesign::new(library, indices);
    let (p, d, dt) = (design.exps.len(), traj.dim(), traj.dt());
    let half = T::of(0.5);
    let mut m_lm = DMatrix::<T>::zeros(p, p);
    let mut m_mm = DMatrix::<T>::zeros(p, p);
    let mut y_acc = DMatrix::<T>::zeros(p, d);
    let mut y_mid_acc = DMatrix::<T>::zeros(p, d);
    let mut c_acc = DMatrix::<T>::zeros(p, d);
    let mut q0_acc = T::zero();
    let (mut rows, mut corr_rows) = (0usize, 0usize);
    let mut left = vec![T::zero(); p];
    let mut right = vec![T::zero(); p];
    let mut mid = vec![T::zero(); p];
    let mut gdot = vec![T::zero(); p];
    let mut v = vec![T::zero(); d];
    let mut wv = vec![T::zero(); d];
    let mut delta = vec![T::zero(); d];
    let mut wdelta = vec![T::zero(); d];
    for k in 0..traj.len() - 1 {
        if !opts.keeps(k) {
            continue;
        }
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        weight.mul_into(&v, &mut wv);
        design_eval(&design, x, &mut left);
        design_eval(&design, xn, &mut right);
        for i in 0..p {
            mid[i] = (left[i] + right[i]) * half;
        }
        for i in 0..p {
            let (li, mi) = (left[i], mid[i]);
            for j in 0..p {
                m_lm[(i, j)] += li * mid[j];
            }
            for j in i..p {
                m_mm[(i, j)] += mi * mid[j];
            }
            for a in 0..d {
                y_acc[(i, a)] += li * wv[a];
                y_mid_acc[(i, a)] += mi * wv[a];
            }
        }
        for a in 0..d {
            q0_acc += v[a] * wv[a];
        }
        rows += 1;
        // The likelihood correction averages over rows that also have the
        // previous increment available.
        if k >= 1 && opts.keeps(k - 1) {
            let xp = traj.row(k - 1);
            for a in 0..d {
                delta[a] = (xn[a] - x[a]) - (x[a] - xp[a]);
            }
            weight.mul_into(&delta, &mut wdelta);
            design.eval_grad_dot(x, &delta, &mut gdot);
            for i in 0..p {
                for a in 0..d {
                    c_acc[(i, a)] += gdot[i] * wdelta[a];
                }
            }
            corr_rows += 1;
        }
    }
    if rows == 0 {
        return no_rows("midpoint fit rows");
    }
    if corr_rows == 0 {
        return no_rows("increment-difference correction rows");
    }
    mirror_upper(&mut m_mm);
    let scale = T::one() / T::from_usize(rows).unwrap();
    let corr_scale = T::one() / (dt * T::from_usize(corr_rows).unwrap());
    Ok(Stats {
        kind: Kind::Trapeze {
            y: design.assemble_vector(&y_acc, scale),
            g_fit: design.assemble_gram(&m_lm, weight, scale),
            y_mid: design.assemble_vector(&y_mid_acc, scale),
            g_mm: design.assemble_gram(&m_mm, weight, scale),
            corr: design.assemble_vector(&c_acc, corr_scale),
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}

fn sde_shift<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let design = SdeDesign::new(library, indices);
    let (p, d, dt) = (design.exps.len(), traj.dim(), traj.dt());
    let mut m_lc = DMatrix::<T>::zeros(p, p);
    let mut m_ll = DMatrix::<T>::zeros(p, p);
    let mut y_acc = DMatrix::<T>::zeros(p, d);
    let mut q0_acc = T::zero();
    let mut rows = 0usize;
    let mut lag = vec![T::zero(); p];
    let mut cur = vec![T::zero(); p];
    let mut v = vec![T::zero(); d];
    let mut wv = vec![T::zero(); d];
    for k in 1..traj.len() - 1 {
        if !opts.keeps(k) || !opts.keeps(k - 1) {
            continue;
        }
        let (xp, x, xn) = (traj.row(k - 1), traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        weight.mul_into(&v, &mut wv);
        design_eval(&design, xp, &mut lag);
        design_eval(&design, x, &mut cur);
        for i in 0..p {
            let li = lag[i];
            for j in 0..p {
                m_lc[(i, j)] += li * cur[j];
            }
            for j in i..p {
                m_ll[(i, j)] += li * lag[j];
            }
            for a in 0..d {
                y_acc[(i, a)] += li * wv[a];
            }
        }
        for a in 0..d {
            q0_acc += v[a] * wv[a];
        }
        rows += 1;
    }
    if rows == 0 {
        return no_rows("lagged fit rows");
    }
    mirror_upper(&mut m_ll);
    let scale = T::one() / T::from_usize(rows).unwrap();
    Ok(Stats {
        kind: Kind::Shift {
            y: design.assemble_vector(&y_acc, scale),
            g_fit: design.assemble_gram(&m_lc, weight, scale),
            g_quad: design.assemble_gram(&m_ll, weight, scale),
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}

/// Per-function cell buffers for one grid snapshot, with the half of the
/// state each function drives (0 for u, 1 for v).
struct FieldBank<T: Scalar> {
    vals: Vec<Vec<T>>,
    targets: Vec<usize>,
}

impl<T: Scalar> FieldBank<T> {
    fn new(nf: usize, cells: usize) -> Self {
        FieldBank {
            vals: vec![vec![T::zero(); cells]; nf],
            targets: vec![0; nf],
        }
    }

    fn eval(&mut self, library: &BasisLibrary, indices: &[usize], state: &[T], grid: &GridSpec<T>) {
        for (slot, &idx) in indices.iter().enumerate() {
            let t = library.eval_field_into(idx, state, grid, &mut self.vals[slot]);
            self.targets[slot] = half_of(t);
        }
    }
}

fn half_of(t: FieldId) -> usize {
    match t {
        FieldId::U => 0,
        FieldId::V => 1,
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn spde_aml<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let grid = traj.grid().expect("checked by caller").clone();
    let (cells, d, dt) = (grid.cells(), traj.dim(), traj.dt());
    let w = weight.scalar();
    let nf = indices.len();
    let mut bank = FieldBank::new(nf, cells);
    let mut g = DMatrix::<T>::zeros(nf, nf);
    let mut y = DVector::<T>::zeros(nf);
    let mut q0_acc = T::zero();
    let mut v = vec![T::zero(); d];
    let mut rows = 0usize;
    for k in 0..traj.len() - 1 {
        if !opts.keeps(k) {
            continue;
        }
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        bank.eval(library, indices, x, &grid);
        for i in 0..nf {
            let ti = bank.targets[i];
            let vi = &bank.vals[i];
            y[i] += w * dot(vi, &v[ti * cells..(ti + 1) * cells]);
            for j in i..nf {
                // Functions driving different fields never overlap.
                if bank.targets[j] == ti {
                    g[(i, j)] += w * dot(vi, &bank.vals[j]);
                }
            }
        }
        for a in 0..d {
            q0_acc += w * v[a] * v[a];
        }
        rows += 1;
    }
    if rows == 0 {
        return no_rows("left-endpoint fit rows");
    }
    mirror_upper(&mut g);
    let scale = T::one() / T::from_usize(rows).unwrap();
    Ok(Stats {
        kind: Kind::Aml {
            y: y * scale,
            g: g * scale,
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}

fn spde_trapeze<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let grid = traj.grid().expect("checked by caller").clone();
    let (cells, d, dt) = (grid.cells(), traj.dim(), traj.dt());
    let w = weight.scalar();
    let half = T::of(0.5);
    let nf = indices.len();
    let mut left = FieldBank::new(nf, cells);
    let mut right = FieldBank::new(nf, cells);
    let mut mid = vec![vec![T::zero(); cells]; nf];
    let mut dbuf = vec![T::zero(); cells];
    let mut g_fit = DMatrix::<T>::zeros(nf, nf);
    let mut g_mm = DMatrix::<T>::zeros(nf, nf);
    let mut y = DVector::<T>::zeros(nf);
    let mut y_mid = DVector::<T>::zeros(nf);
    let mut c_acc = DVector::<T>::zeros(nf);
    let mut q0_acc = T::zero();
    let (mut rows, mut corr_rows) = (0usize, 0usize);
    let mut v = vec![T::zero(); d];
    let mut delta = vec![T::zero(); d];
    let mut have_left: Option<usize> = None;
    for k in 0..traj.len() - 1 {
        if !opts.keeps(k) {
            continue;
        }
        let (x, xn) = (traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        if have_left != Some(k) {
            left.eval(library, indices, x, &grid);
        }
        right.eval(library, indices, xn, &grid);
        for i in 0..nf {
            for c in 0..cells {
                mid[i][c] = (left.vals[i][c] + right.vals[i][c]) * half;
            }
        }
        for i in 0..nf {
            let ti = left.targets[i];
            let vh = &v[ti * cells..(ti + 1) * cells];
            y[i] += w * dot(&left.vals[i], vh);
            y_mid[i] += w * dot(&mid[i], vh);
            for j in 0..nf {
                if left.targets[j] != ti {
                    continue;
                }
                g_fit[(i, j)] += w * dot(&left.vals[i], &mid[j]);
                if j >= i {
                    g_mm[(i, j)] += w * dot(&mid[i], &mid[j]);
                }
            }
        }
        for a in 0..d {
            q0_acc += w * v[a] * v[a];
        }
        rows += 1;
        if k >= 1 && opts.keeps(k - 1) {
            let xp = traj.row(k - 1);
            for a in 0..d {
                delta[a] = (xn[a] - x[a]) - (x[a] - xp[a]);
            }
            for (slot, &idx) in indices.iter().enumerate() {
                let t = library.field_directional_into(idx, x, &delta, &grid, &mut dbuf);
                let ti = half_of(t);
                c_acc[slot] += w * dot(&dbuf, &delta[ti * cells..(ti + 1) * cells]);
            }
            corr_rows += 1;
        }
        std::mem::swap(&mut left, &mut right);
        have_left = Some(k + 1);
    }
    if rows == 0 {
        return no_rows("midpoint fit rows");
    }
    if corr_rows == 0 {
        return no_rows("increment-difference correction rows");
    }
    mirror_upper(&mut g_mm);
    let scale = T::one() / T::from_usize(rows).unwrap();
    let corr_scale = T::one() / (dt * T::from_usize(corr_rows).unwrap());
    Ok(Stats {
        kind: Kind::Trapeze {
            y: y * scale,
            g_fit: g_fit * scale,
            y_mid: y_mid * scale,
            g_mm: g_mm * scale,
            corr: c_acc * corr_scale,
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}

fn spde_shift<T: Scalar>(
    traj: &Trajectory<T>,
    library: &BasisLibrary,
    indices: &[usize],
    weight: &Weight<T>,
    opts: &BuildOpts<T>,
) -> Result<Stats<T>> {
    let grid = traj.grid().expect("checked by caller").clone();
    let (cells, d, dt) = (grid.cells(), traj.dim(), traj.dt());
    let w = weight.scalar();
    let nf = indices.len();
    let mut lag = FieldBank::new(nf, cells);
    let mut cur = FieldBank::new(nf, cells);
    let mut g_fit = DMatrix::<T>::zeros(nf, nf);
    let mut g_quad = DMatrix::<T>::zeros(nf, nf);
    let mut y = DVector::<T>::zeros(nf);
    let mut q0_acc = T::zero();
    let mut rows = 0usize;
    let mut v = vec![T::zero(); d];
    let mut have_lag: Option<usize> = None;
    for k in 1..traj.len() - 1 {
        if !opts.keeps(k) || !opts.keeps(k - 1) {
            continue;
        }
        let (xp, x, xn) = (traj.row(k - 1), traj.row(k), traj.row(k + 1));
        for a in 0..d {
            v[a] = (xn[a] - x[a]) / dt;
        }
        if have_lag != Some(k - 1) {
            lag.eval(library, indices, xp, &grid);
        }
        cur.eval(library, indices, x, &grid);
        for i in 0..nf {
            let ti = lag.targets[i];
            y[i] += w * dot(&lag.vals[i], &v[ti * cells..(ti + 1) * cells]);
            for j in 0..nf {
                if lag.targets[j] != ti {
                    continue;
                }
                g_fit[(i, j)] += w * dot(&lag.vals[i], &cur.vals[j]);
                if j >= i {
                    g_quad[(i, j)] += w * dot(&lag.vals[i], &lag.vals[j]);
                }
            }
        }
        for a in 0..d {
            q0_acc += w * v[a] * v[a];
        }
        rows += 1;
        std::mem::swap(&mut lag, &mut cur);
        have_lag = Some(k);
    }
    if rows == 0 {
        return no_rows("lagged fit rows");
    }
    mirror_upper(&mut g_quad);
    let scale = T::one() / T::from_usize(rows).unwrap();
    Ok(Stats {
        kind: Kind::Shift {
            y: y * scale,
            g_fit: g_fit * scale,
            g_quad: g_quad * scale,
            q0: q0_acc * scale,
        },
        n_rows: rows,
    })
}
