//! Simulation, drift inference, and sparse model selection for stochastic
//! dynamical systems.
//!
//! The crate covers the full loop: integrate an SDE or a stochastic
//! reaction-diffusion field ([`sde`], [`spde`]), expand candidate drifts
//! over a basis-function library ([`basis`]), fit coefficients with
//! estimators that stay consistent under coarse sampling and measurement
//! noise ([`estimators`]), and pick the minimal model that supports the
//! data ([`selection`]).
//!
//! Everything numerical is generic over the scalar type through
//! [`num::Scalar`]; the `f64` aliases at the crate root are the ones most
//! callers want.

pub mod basis;
mod error;
pub mod estimators;
pub mod num;
pub mod rng;
pub mod sde;
pub mod selection;
pub mod spde;
pub mod trajectory;

pub use error::{Error, Result};

/// Double-precision trajectory, the default for all presets.
pub type Trajectory64 = trajectory::Trajectory<f64>;
/// Double-precision drift specification.
pub type DriftSpec64 = sde::DriftSpec<f64>;
/// Double-precision noise specification.
pub type NoiseSpec64 = sde::NoiseSpec<f64>;
/// Double-precision periodic grid.
pub type GridSpec64 = spde::GridSpec<f64>;
