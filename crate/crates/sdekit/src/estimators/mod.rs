//! Drift and diffusion inference from discretely sampled trajectories.
//!
//! All estimators share one shape: project the increments Delta x / Delta t
//! onto a basis-function library under the weight (4 Dbar)^-1, solve the
//! resulting linear system, and score the fit with a quasi log-likelihood
//! of the form -tau <r^T (4 Dbar)^-1 r>. They differ in where the basis is
//! evaluated and which diffusion estimate supplies the weight:
//!
//! * [`fit_aml`] evaluates at the left endpoint with the plain diffusion
//!   estimate. Fast and asymptotically efficient, but biased at coarse
//!   sampling and under measurement noise.
//! * [`fit_trapeze`] regresses against interval midpoints with a
//!   drift-debiased three-point diffusion, shrinking the sampling-interval
//!   bias from O(dt) to O(dt^2).
//! * [`fit_shift`] evaluates at the previous observation, decorrelating the
//!   basis from the measurement noise in the increment.
//! * [`fit_stratonovich`] averages the two endpoints and subtracts the
//!   resulting Ito correction explicitly.
//!
//! [`FitCache`] precomputes the moment matrices once per trajectory so that
//! model-search code can score thousands of sub-models at negligible cost.

mod cache;
mod diffusion;
mod error_metrics;
mod fit;
mod likelihood;
mod linalg;

pub use cache::{FitCache, ScoredFit};
pub use diffusion::{
    diffusion_simple, diffusion_three_point, diffusion_vestergaard, DiffusionEstimate,
    DiffusionMethod, DiffusionValue,
};
pub use error_metrics::{drift_error, error_estimate_multiplicative, DriftErrorReport};
pub use fit::{
    coefficient_variance, fit_aml, fit_shift, fit_stratonovich, fit_trapeze, gram,
    EstimatorKind, FitResult,
};
pub use likelihood::{log_likelihood, log_likelihood_dt, log_likelihood_shift};

pub(crate) use cache::BuildOpts;
