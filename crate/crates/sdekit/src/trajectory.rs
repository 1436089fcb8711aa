//! Uniformly sampled trajectories and their file format.
//!
//! A [`Trajectory`] is an N x d array of states at spacing `dt`, stored
//! row-major so the estimators can walk consecutive states as slices. States
//! from a grid simulation carry their [`GridSpec`] along, which is how the
//! field-aware code paths recognize them.
//!
//! The on-disk format is a CSV with header `t,x1,...,xd`, one row per state,
//! numbers written in shortest round-trip form. Metadata that cannot be
//! recovered from the samples (seed, generating equations) travels in a JSON
//! sidecar written by the simulation layer.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::Distribution;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::{rng_for, stream};
use crate::spde::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    data: Vec<T>,
    n: usize,
    d: usize,
    dt: T,
    grid: Option<GridSpec<T>>,
}

impl<T: Scalar> Trajectory<T> {
    /// Builds a trajectory from a flat row-major buffer of `n * d` values.
    pub fn from_flat(data: Vec<T>, d: usize, dt: T) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if dt <= T::zero() {
            return Err(Error::invalid("dt must be positive"));
        }
        if data.is_empty() || data.len() % d != 0 {
            return Err(Error::DimensionMismatch {
                what: "trajectory buffer",
                expected: d,
                got: data.len(),
            });
        }
        let n = data.len() / d;
        Ok(Trajectory {
            data,
            n,
            d,
            dt,
            grid: None,
        })
    }

    /// Builds a trajectory from one `Vec` per state.
    pub fn from_rows(rows: &[Vec<T>], dt: T) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "trajectory row",
                    expected: d,
                    got: r.len(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend_from_slice(r);
        }
        Trajectory::from_flat(data, d, dt)
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// State dimension d.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// Sampling interval.
    pub fn dt(&self) -> T {
        self.dt
    }

    /// State at index `k` as a slice of length d.
    pub fn row(&self, k: usize) -> &[T] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    /// Iterator over states in order.
    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.d)
    }

    /// Grid layout, present when the states are flattened fields.
    pub fn grid(&self) -> Option<&GridSpec<T>> {
        self.grid.as_ref()
    }

    /// Declares the states to be flattened field snapshots on `grid`. Needed
    /// when grid data re-enters through [`Trajectory::read_csv`], which has no
    /// way to recover the layout from the flat columns.
    pub fn with_grid(mut self, grid: GridSpec<T>) -> Self {
        self.grid = Some(grid);
        self
    }

    /// Keeps every `stride`-th state starting from the first; the result has
    /// sampling interval `stride * dt`. Fails with [`Error::EmptyResult`]
    /// when fewer than two states would remain.
    pub fn subsample(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("subsample stride must be positive"));
        }
        let kept = (self.n + stride - 1) / stride;
        if kept < 2 {
            return Err(Error::EmptyResult);
        }
        let mut data = Vec::with_capacity(kept * self.d);
        for k in (0..self.n).step_by(stride) {
            data.extend_from_slice(self.row(k));
        }
        Ok(Trajectory {
            data,
            n: kept,
            d: self.d,
            dt: self.dt * T::from_usize(stride).unwrap(),
            grid: self.grid.clone(),
        })
    }

    /// Adds i.i.d. Gaussian measurement noise of standard deviation `sigma`
    /// to every component of every state. The dynamics are untouched; this
    /// models an imperfect observation of the same path.
    pub fn add_measurement_noise(&self, sigma: T, seed: u64) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        if sigma < T::zero() {
            return Err(Error::invalid("noise level must be non-negative"));
        }
        let mut rng = rng_for(seed, stream::MEASUREMENT_NOISE);
        let data = self
            .data
            .iter()
            .map(|&x| x + sigma * StandardNormal.sample(&mut rng))
            .collect();
        Ok(Trajectory {
            data,
            n: self.n,
            d: self.d,
            dt: self.dt,
            grid: self.grid.clone(),
        })
    }

    /// Forward differences `x[k+1] - x[k]`, an (N-1) x d matrix.
    pub fn increments(&self) -> DMatrix<T> {
        let rows = self.n.saturating_sub(1);
        DMatrix::from_fn(rows, self.d, |k, j| {
            self.data[(k + 1) * self.d + j] - self.data[k * self.d + j]
        })
    }

    /// Writes `t,x1,...,xd` CSV. Numbers use shortest round-trip formatting,
    /// so reading the file back reproduces the values bit for bit.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(w, "t")?;
        for j in 1..=self.d {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for k in 0..self.n {
            let t = self.dt * T::from_usize(k).unwrap();
            write!(w, "{}", t.f64())?;
            for j in 0..self.d {
                write!(w, ",{}", self.data[k * self.d + j].f64())?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv) or any file with
    /// the same layout. The sampling interval is inferred from the time
    /// column and must be uniform to within a relative 1e-6.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();

        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "empty file".into(),
        })?;
        let header = header?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first().map(|c| c.trim()) != Some("t") || cols.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `t,x1,...`, got `{header}`"),
            });
        }
        let d = cols.len() - 1;

        let mut times = Vec::new();
        let mut data = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("expected {} fields, got {}", d + 1, fields.len()),
                });
            }
            let mut parsed = fields.iter().map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    reason: format!("bad number `{}`: {e}", f.trim()),
                })
            });
            times.push(parsed.next().unwrap()?);
            for v in parsed {
                data.push(T::of(v?));
            }
        }

        if times.len() < 2 {
            return Err(Error::InsufficientData {
                what: "trajectory file",
                needed: 2,
                got: times.len(),
            });
        }
        let dt = times[1] - times[0];
        if dt <= 0.0 {
            return Err(Error::Parse {
                line: 3,
                reason: "time column must be strictly increasing".into(),
            });
        }
        for (k, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.abs() {
                return Err(Error::Parse {
                    line: k + 3,
                    reason: "non-uniform time spacing".into(),
                });
            }
        }
        Trajectory::from_flat(data, d, T::of(dt))
    }
}
