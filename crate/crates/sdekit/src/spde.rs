//! Stochastic reaction-diffusion on a periodic grid.
//!
//! The two-species Gray-Scott system is integrated on an nx x ny periodic
//! lattice with centered second-order stencils and explicit Euler time
//! stepping. Space-time white noise enters each cell with amplitude
//! sqrt(2 D dt / dV), dV = dx^2, so refining the grid strengthens the
//! per-cell fluctuations the way a continuum field requires.
//!
//! A [`FieldTrajectory`] flattens each snapshot to a row `[u..., v...]` with
//! cell (i, j) at offset i*ny + j, which [`FieldTrajectory::to_trajectory`]
//! hands to the estimators as one high-dimensional state vector.

use std::io::Write as _;
use std::path::Path;

use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{FieldId, FieldOp};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::{rng_for, stream};
use crate::sde::BurnIn;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GridSpec<T: Scalar> {
    pub nx: usize,
    pub ny: usize,
    pub dx: T,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(nx: usize, ny: usize, dx: T) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::invalid("grid must be at least 3 x 3"));
        }
        if dx <= T::zero() {
            return Err(Error::invalid("cell size must be positive"));
        }
        Ok(GridSpec { nx, ny, dx })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_volume(&self) -> T {
        self.dx * self.dx
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GrayScottParams<T: Scalar> {
    pub du: T,
    pub dv: T,
    pub f: T,
    pub k: T,
    /// Intensity of the space-time white noise on both fields.
    pub d: T,
}

impl<T: Scalar> GrayScottParams<T> {
    /// The published benchmark parameters, in the pattern-forming regime.
    pub fn paper() -> Self {
        GrayScottParams {
            du: T::of(0.2097),
            dv: T::of(0.105),
            f: T::of(0.029),
            k: T::of(0.057),
            d: T::of(0.001),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("du", self.du),
            ("dv", self.dv),
            ("f", self.f),
            ("k", self.k),
            ("d", self.d),
        ] {
            if v < T::zero() {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Applies a one-field derivative stencil over the periodic grid, writing
/// `grid.cells()` values. `Identity` never reaches here; callers evaluate
/// plain reaction terms directly.
pub(crate) fn apply_field_op<T: Scalar>(
    op: FieldOp,
    u: &[T],
    v: &[T],
    grid: &GridSpec<T>,
    out: &mut [T],
) {
    let (nx, ny) = (grid.nx, grid.ny);
    let w = match op {
        FieldOp::Dx(f) | FieldOp::Dy(f) | FieldOp::Dxx(f) | FieldOp::Dyy(f)
        | FieldOp::Laplacian(f) => match f {
            FieldId::U => u,
            FieldId::V => v,
        },
        FieldOp::Identity => unreachable!("identity handled by the caller"),
    };
    let inv_2dx = T::one() / (T::of(2.0) * grid.dx);
    let inv_dx2 = T::one() / grid.cell_volume();
    for i in 0..nx {
        let ip = if i + 1 == nx { 0 } else { i + 1 };
        let im = if i == 0 { nx - 1 } else { i - 1 };
        for j in 0..ny {
            let jp = if j + 1 == ny { 0 } else { j + 1 };
            let jm = if j == 0 { ny - 1 } else { j - 1 };
            let c = i * ny + j;
            out[c] = match op {
                FieldOp::Dx(_) => (w[ip * ny + j] - w[im * ny + j]) * inv_2dx,
                FieldOp::Dy(_) => (w[i * ny + jp] - w[i * ny + jm]) * inv_2dx,
                FieldOp::Dxx(_) => {
                    (w[ip * ny + j] - T::of(2.0) * w[c] + w[im * ny + j]) * inv_dx2
                }
                FieldOp::Dyy(_) => {
                    (w[i * ny + jp] - T::of(2.0) * w[c] + w[i * ny + jm]) * inv_dx2
                }
                FieldOp::Laplacian(_) => {
                    (w[ip * ny + j] + w[im * ny + j] + w[i * ny + jp] + w[i * ny + jm]
                        - T::of(4.0) * w[c])
                        * inv_dx2
                }
                FieldOp::Identity => unreachable!(),
            };
        }
    }
}

/// Five-point Laplacian of one field on the periodic grid.
pub fn laplacian_periodic<T: Scalar>(field: &[T], grid: &GridSpec<T>) -> Result<Vec<T>> {
    if field.len() != grid.cells() {
        return Err(Error::DimensionMismatch {
            what: "field passed to laplacian",
            expected: grid.cells(),
            got: field.len(),
        });
    }
    let mut out = vec![T::zero(); grid.cells()];
    apply_field_op(FieldOp::Laplacian(FieldId::U), field, field, grid, &mut out);
    Ok(out)
}

/// Starting fields for the two-species simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition<T: Scalar> {
    /// The trivial steady state u = 1, v = 0 everywhere.
    FixedPoint,
    /// The trivial state with a central square seed (side nx/4) at
    /// u = 1/2, v = 1/4, plus small seeded jitter to break symmetry.
    Patch,
    /// Explicit fields, each of length `grid.cells()`.
    Fields { u: Vec<T>, v: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrajectory<T: Scalar> {
    data: Vec<T>,
    nt: usize,
    grid: GridSpec<T>,
    dt: T,
}

impl<T: Scalar> FieldTrajectory<T> {
    pub fn len(&self) -> usize {
        self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.nt == 0
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    /// Full snapshot k: u values then v values.
    pub fn snapshot(&self, k: usize) -> &[T] {
        let w = 2 * self.grid.cells();
        &self.data[k * w..(k + 1) * w]
    }

    pub fn u(&self, k: usize) -> &[T] {
        &self.snapshot(k)[..self.grid.cells()]
    }

    pub fn v(&self, k: usize) -> &[T] {
        &self.snapshot(k)[self.grid.cells()..]
    }

    /// Reinterprets the snapshots as one trajectory in dimension
    /// 2 * nx * ny, keeping the grid attached so estimators can recognize
    /// field data. Cell (i, j) of v maps to column nx*ny + i*ny + j.
    pub fn to_trajectory(self) -> Trajectory<T> {
        let d = 2 * self.grid.cells();
        let grid = self.grid;
        Trajectory::from_flat(self.data, d, self.dt)
            .expect("snapshots form a valid trajectory")
            .with_grid(grid)
    }
}

pub struct SpdeSimResult<T: Scalar> {
    pub fields: FieldTrajectory<T>,
    /// Set when dt_sim * max(Du, Dv) / dx^2 exceeds 1/4, the explicit
    /// scheme's diffusive stability bound.
    pub stability_warning: bool,
}

/// Integrates the stochastic two-species system and records
/// `n_snapshots + 1` snapshots spaced `record_stride` integration steps
/// apart (so the data interval is `record_stride * dt_sim`). Burn-in steps
/// are integrated and discarded first.
#[allow(clippy::too_many_arguments)]
pub fn simulate_gray_scott<T: Scalar>(
    params: &GrayScottParams<T>,
    grid: &GridSpec<T>,
    ic: &InitialCondition<T>,
    dt_sim: T,
    n_snapshots: usize,
    record_stride: usize,
    seed: u64,
    burn_in: BurnIn,
) -> Result<SpdeSimResult<T>>
where
    StandardNormal: Distribution<T>,
{
    params.validate()?;
    if dt_sim <= T::zero() {
        return Err(Error::invalid("dt_sim must be positive"));
    }
    if n_snapshots == 0 || record_stride == 0 {
        return Err(Error::invalid(
            "need at least one snapshot and a positive record stride",
        ));
    }
    let n = grid.cells();
    let (mut u, mut v) = initial_fields(ic, grid, seed)?;
    if u.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial fields",
            expected: n,
            got: u.len(),
        });
    }

    let stability_warning =
        dt_sim * params.du.max(params.dv) / grid.cell_volume() > T::of(0.25);
    let amp = (T::of(2.0) * params.d * dt_sim / grid.cell_volume()).sqrt();
    let burn = match burn_in {
        BurnIn::None => 0,
        BurnIn::Steps(s) => s,
        BurnIn::Default => (T::of(10.0) / dt_sim).ceil().to_usize().unwrap_or(0),
    };

    let mut rng = rng_for(seed, stream::SIMULATE);
    let mut lap_u = vec![T::zero(); n];
    let mut lap_v = vec![T::zero(); n];
    let mut data = Vec::with_capacity((n_snapshots + 1) * 2 * n);
    let one = T::one();

    let mut step = |u: &mut [T], v: &mut [T], rng: &mut rand_chacha::ChaCha8Rng, at: usize| {
        apply_field_op(FieldOp::Laplacian(FieldId::U), u, v, grid, &mut lap_u);
        apply_field_op(FieldOp::Laplacian(FieldId::V), u, v, grid, &mut lap_v);
        for c in 0..n {
            let uvv = u[c] * v[c] * v[c];
            let du = params.du * lap_u[c] - uvv + params.f * (one - u[c]);
            let dv = params.dv * lap_v[c] + uvv - (params.f + params.k) * v[c];
            u[c] += du * dt_sim + amp * StandardNormal.sample(rng);
            v[c] += dv * dt_sim + amp * StandardNormal.sample(rng);
            if u[c].not_finite() || v[c].not_finite() {
                return Err(Error::NonFinite { step: at });
            }
        }
        Ok(())
    };

    for at in 0..burn {
        step(&mut u, &mut v, &mut rng, at)?;
    }
    data.extend_from_slice(&u);
    data.extend_from_slice(&v);
    for s in 0..n_snapshots {
        for sub in 0..record_stride {
            step(&mut u, &mut v, &mut rng, burn + s * record_stride + sub)?;
        }
        data.extend_from_slice(&u);
        data.extend_from_slice(&v);
    }

    Ok(SpdeSimResult {
        fields: FieldTrajectory {
            data,
            nt: n_snapshots + 1,
            grid: *grid,
            dt: dt_sim * T::from_usize(record_stride).unwrap(),
        },
        stability_warning,
    })
}

fn initial_fields<T: Scalar>(
    ic: &InitialCondition<T>,
    grid: &GridSpec<T>,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)>
where
    StandardNormal: Distribution<T>,
{
    let n = grid.cells();
    match ic {
        InitialCondition::FixedPoint => Ok((vec![T::one(); n], vec![T::zero(); n])),
        InitialCondition::Patch => {
            let mut u = vec![T::one(); n];
            let mut v = vec![T::zero(); n];
            let side = (grid.nx / 4).max(1);
            let (i0, j0) = ((grid.nx - side) / 2, (grid.ny - side.min(grid.ny)) / 2);
            for i in i0..i0 + side {
                for j in j0..j0 + side.min(grid.ny) {
                    u[grid.idx(i, j)] = T::of(0.5);
                    v[grid.idx(i, j)] = T::of(0.25);
                }
            }
            let mut rng = rng_for(seed, stream::INITIAL_CONDITION);
            let jitter = T::of(0.01);
            for c in 0..n {
                u[c] += jitter * StandardNormal.sample(&mut rng);
                v[c] += jitter * StandardNormal.sample(&mut rng);
            }
            Ok((u, v))
        }
        InitialCondition::Fields { u, v } => Ok((u.clone(), v.clone())),
    }
}

/// Writes one field as an ASCII PGM image, linearly rescaled to 0..255.
/// Handy for eyeballing pattern formation; not used by the estimators.
pub fn write_pgm<T: Scalar>(field: &[T], grid: &GridSpec<T>, path: impl AsRef<Path>) -> Result<()> {
    if field.len() != grid.cells() {
        return Err(Error::DimensionMismatch {
            what: "field passed to pgm export",
            expected: grid.cells(),
            got: field.len(),
        });
    }
    let lo = field.iter().cloned().fold(field[0], |a, b| a.min(b));
    let hi = field.iter().cloned().fold(field[0], |a, b| a.max(b));
    let span = if hi > lo { hi - lo } else { T::one() };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "P2")?;
    writeln!(out, "{} {}", grid.ny, grid.nx)?;
    writeln!(out, "255")?;
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let g = ((field[grid.idx(i, j)] - lo) / span * T::of(255.0))
                .round()
                .to_u8()
                .unwrap_or(0);
            if j > 0 {
                write!(out, " ")?;
            }
            write!(out, "{g}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
