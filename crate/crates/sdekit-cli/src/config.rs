//! The experiment config schema shared by `simulate` and `benchmark`.
//!
//! One JSON document describes a whole experiment: the generating system,
//! the candidate library, the observation parameters, and (for sweeps) the
//! axis, its values, and the criteria to race. `simulate` reads the same
//! schema and simply ignores the sweep block, so a benchmark config doubles
//! as the recipe for inspecting one of its trajectories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdekit::basis::{
    gray_scott_library, gray_scott_true_model, lv_library, polynomial_library, true_model,
    BasisLibrary, ModelBasis,
};
use sdekit::sde::{systems, DriftSpec, NoiseSpec};
use sdekit::selection::Criterion;
use sdekit::spde::{GrayScottParams, GridSpec};
use sdekit::{Error, Result};

/// Tail mass used by the pastis family when neither the criterion entry nor
/// the sweep provides one.
pub const DEFAULT_P: f64 = 1e-3;

fn default_p() -> f64 {
    DEFAULT_P
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub library: LibrarySpec,
    /// Output path: the result CSV for `benchmark`, the trajectory CSV for
    /// `simulate` (which writes a JSON sidecar next to it).
    pub out: PathBuf,
    /// Observation time of one trajectory.
    pub tau: f64,
    /// Sampling interval of the stored rows.
    pub dt: f64,
    /// Integration step; defaults to `dt` and must divide it.
    #[serde(default)]
    pub sim_dt: Option<f64>,
    /// Measurement noise added independently to every stored coordinate.
    #[serde(default)]
    pub sigma: f64,
    /// Master seed. Run r of sweep point i uses seed + i * runs + r.
    #[serde(default)]
    pub seed: u64,
    /// Burn-in integration steps; defaults to the simulator's own choice.
    #[serde(default)]
    pub burn_steps: Option<usize>,
    /// Estimator used to refit the chosen model for the error columns.
    #[serde(default)]
    pub estimator: EstimatorName,
    /// Independent trajectories per sweep point.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Default tail mass for pastis-family criteria.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Sweep block; required by `benchmark`, ignored by `simulate`.
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    /// Criteria raced on every trajectory; required by `benchmark`.
    #[serde(default)]
    pub criteria: Vec<CriterionSpec>,
    /// Full-scale overrides applied by `--paper-scale`.
    #[serde(default)]
    pub paper: Option<ScaleOverrides>,
}

/// The fields a config may change when run at full published scale.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScaleOverrides {
    #[serde(default)]
    pub runs: Option<usize>,
    /// Replacement sweep values.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub sim_dt: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let cfg: ExperimentConfig = serde_json::from_reader(file)?;
        Ok(cfg)
    }

    /// Replaces desk-scale values with the config's `paper` block. A config
    /// without one cannot honor the flag, which is a usage error rather than
    /// a silent desk-scale run.
    pub fn apply_paper_scale(&mut self) -> Result<()> {
        let Some(over) = self.paper.take() else {
            return Err(Error::InvalidParameter {
                reason: "--paper-scale requires a `paper` block in the config".into(),
            });
        };
        if let Some(r) = over.runs {
            self.runs = r;
        }
        if let Some(v) = over.values {
            if let Some(sweep) = self.sweep.as_mut() {
                sweep.values = v;
            }
        }
        if let Some(t) = over.tau {
            self.tau = t;
        }
        if let Some(dt) = over.dt {
            self.dt = dt;
        }
        if over.sim_dt.is_some() {
            self.sim_dt = over.sim_dt;
        }
        if let Some(s) = over.sigma {
            self.sigma = s;
        }
        Ok(())
    }

    /// Checks the fields every verb relies on.
    pub fn validate_common(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter {
                reason: "tau must be positive".into(),
            });
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter {
                reason: "dt must be positive".into(),
            });
        }
        if let Some(sd) = self.sim_dt {
            stride_of(self.dt, sd)?;
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidParameter {
                reason: "sigma must be non-negative".into(),
            });
        }
        if self.runs == 0 {
            return Err(Error::InvalidParameter {
                reason: "runs must be at least 1".into(),
            });
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter {
                reason: "p must lie in (0, 1)".into(),
            });
        }
        self.system.validate()?;
        Ok(())
    }

    /// Checks the sweep block on top of the common fields and returns it.
    pub fn validate_sweep(&self) -> Result<&SweepSpec> {
        self.validate_common()?;
        let sweep = self.sweep.as_ref().ok_or_else(|| Error::InvalidParameter {
            reason: "benchmark needs a `sweep` block (axis and values)".into(),
        })?;
        if sweep.values.is_empty() {
            return Err(Error::InvalidParameter {
                reason: "sweep.values must not be empty".into(),
            });
        }
        for &v in &sweep.values {
            match sweep.axis {
                SweepAxis::Tau | SweepAxis::Dt => {
                    if !(v > 0.0) {
                        return Err(Error::InvalidParameter {
                            reason: format!("sweep value {v} must be positive"),
                        });
                    }
                }
                SweepAxis::Sigma => {
                    if v < 0.0 {
                        return Err(Error::InvalidParameter {
                            reason: format!("sweep value {v} must be non-negative"),
                        });
                    }
                }
                SweepAxis::P => {
                    if !(v > 0.0 && v < 1.0) {
                        return Err(Error::InvalidParameter {
                            reason: format!("sweep value {v} must lie in (0, 1)"),
                        });
                    }
                }
            }
            if sweep.axis == SweepAxis::Dt {
                if let Some(sd) = self.sim_dt {
                    stride_of(v, sd)?;
                }
            }
        }
        if self.criteria.is_empty() {
            return Err(Error::InvalidParameter {
                reason: "benchmark needs at least one criterion".into(),
            });
        }
        for spec in &self.criteria {
            if let Some(c) = spec.to_criterion(spec.effective_p(None, self.p)) {
                c.validate()?;
            }
        }
        Ok(sweep)
    }
}

/// Number of integration steps per stored row. `dt` must be an integer
/// multiple of `sim_dt`, up to rounding slack.
pub fn stride_of(dt: f64, sim_dt: f64) -> Result<usize> {
    if !(sim_dt > 0.0) {
        return Err(Error::InvalidParameter {
            reason: "sim_dt must be positive".into(),
        });
    }
    let ratio = dt / sim_dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-6 * ratio.max(1.0) {
        return Err(Error::InvalidParameter {
            reason: format!("sim_dt {sim_dt} must divide the sampling interval {dt}"),
        });
    }
    Ok(stride as usize)
}

fn default_grid_n() -> usize {
    32
}

fn default_dx() -> f64 {
    1.0
}

/// Generating system. The built-ins carry their published parameters; only
/// the state dimension (for `ou`) and the grid (for `gray_scott`) are open.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    Lorenz,
    Ou {
        d: usize,
    },
    Lv,
    GrayScott {
        #[serde(default = "default_grid_n")]
        nx: usize,
        #[serde(default = "default_grid_n")]
        ny: usize,
        #[serde(default = "default_dx")]
        dx: f64,
    },
    Custom {
        drift: DriftSpec<f64>,
        noise: NoiseSpec<f64>,
        x0: Vec<f64>,
    },
}

impl SystemSpec {
    pub fn label(&self) -> String {
        match self {
            SystemSpec::Lorenz => "lorenz".into(),
            SystemSpec::Ou { d } => format!("ou{d}"),
            SystemSpec::Lv => "lv".into(),
            SystemSpec::GrayScott { .. } => "gray_scott".into(),
            SystemSpec::Custom { .. } => "custom".into(),
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, SystemSpec::GrayScott { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::GrayScott { nx, ny, dx } => {
                GridSpec::new(*nx, *ny, *dx)?;
                Ok(())
            }
            SystemSpec::Custom { drift, x0, .. } => {
                let d = drift.validate()?;
                if x0.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "custom initial state",
                        expected: d,
                        got: x0.len(),
                    });
                }
                Ok(())
            }
            _ => {
                self.sde_parts()?;
                Ok(())
            }
        }
    }

    /// Drift, noise, and starting state for the point-process systems.
    pub fn sde_parts(&self) -> Result<(DriftSpec<f64>, NoiseSpec<f64>, Vec<f64>)> {
        match self {
            SystemSpec::Lorenz => Ok(systems::lorenz()),
            SystemSpec::Ou { d: 3 } => Ok(systems::ou3()),
            SystemSpec::Ou { d: 10 } => Ok(systems::ou10()),
            SystemSpec::Ou { d } => Err(Error::InvalidParameter {
                reason: format!("built-in ou systems exist for d = 3 or 10, not {d}"),
            }),
            SystemSpec::Lv => Ok(systems::lv7()),
            SystemSpec::GrayScott { .. } => Err(Error::Unsupported {
                reason: "gray_scott integrates on a grid, not as a point process".into(),
            }),
            SystemSpec::Custom { drift, noise, x0 } => {
                Ok((drift.clone(), noise.clone(), x0.clone()))
            }
        }
    }

    pub fn grid(&self) -> Result<GridSpec<f64>> {
        match self {
            SystemSpec::GrayScott { nx, ny, dx } => GridSpec::new(*nx, *ny, *dx),
            _ => Err(Error::Unsupported {
                reason: "only gray_scott carries a grid".into(),
            }),
        }
    }

    /// State dimension of one stored row.
    pub fn dim(&self) -> Result<usize> {
        match self {
            SystemSpec::GrayScott { .. } => Ok(2 * self.grid()?.cells()),
            SystemSpec::Custom { drift, .. } => drift.validate(),
            _ => Ok(self.sde_parts()?.2.len()),
        }
    }

    /// The system's exact drift expressed in `library`, when representable.
    pub fn truth(&self, library: &BasisLibrary) -> Result<(ModelBasis, Vec<f64>)> {
        match self {
            SystemSpec::GrayScott { .. } => {
                gray_scott_true_model(&GrayScottParams::paper(), library)
            }
            _ => {
                let (drift, _, _) = self.sde_parts()?;
                true_model(&drift, library)
            }
        }
    }
}

/// Candidate library; the state dimension comes from the system or the
/// trajectory, never from the spec itself.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LibrarySpec {
    Polynomial { degree: u32 },
    LotkaVolterra,
    GrayScott,
}

impl LibrarySpec {
    pub fn build(&self, state_dim: usize) -> Result<BasisLibrary> {
        match self {
            LibrarySpec::Polynomial { degree } => polynomial_library(state_dim, *degree),
            LibrarySpec::LotkaVolterra => lv_library(state_dim),
            LibrarySpec::GrayScott => Ok(gray_scott_library()),
        }
    }

    /// Command-line form: `poly:DEGREE`, `lv`, or `gray-scott`.
    pub fn parse_flag(s: &str) -> Result<Self> {
        if let Some(deg) = s.strip_prefix("poly:") {
            let degree = deg.parse::<u32>().map_err(|_| Error::InvalidParameter {
                reason: format!("bad polynomial degree `{deg}`"),
            })?;
            return Ok(LibrarySpec::Polynomial { degree });
        }
        match s {
            "lv" => Ok(LibrarySpec::LotkaVolterra),
            "gray-scott" => Ok(LibrarySpec::GrayScott),
            _ => Err(Error::InvalidParameter {
                reason: format!("unknown library `{s}` (expected poly:DEGREE, lv, or gray-scott)"),
            }),
        }
    }
}

/// One entry of the criterion race. The pastis family resolves its tail
/// mass at run time: a `p` sweep value wins, then the entry's own `p`,
/// then the config default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriterionSpec {
    Aic,
    Bic,
    Ebic {
        gamma: f64,
    },
    Cv {
        folds: usize,
    },
    Pastis {
        #[serde(default)]
        p: Option<f64>,
    },
    PastisDt {
        #[serde(default)]
        p: Option<f64>,
    },
    PastisSigma {
        #[serde(default)]
        p: Option<f64>,
    },
    /// Sequential coefficient thresholding; not a likelihood criterion, so
    /// rows report no score-based columns beyond the refit's.
    Stlsq {
        threshold: f64,
    },
}

impl CriterionSpec {
    pub fn label(&self) -> &'static str {
        match self {
            CriterionSpec::Aic => "aic",
            CriterionSpec::Bic => "bic",
            CriterionSpec::Ebic { .. } => "ebic",
            CriterionSpec::Cv { .. } => "cv",
            CriterionSpec::Pastis { .. } => "pastis",
            CriterionSpec::PastisDt { .. } => "pastis-dt",
            CriterionSpec::PastisSigma { .. } => "pastis-sigma",
            CriterionSpec::Stlsq { .. } => "stlsq",
        }
    }

    /// Tail mass this entry runs with, `None` for criteria without one.
    pub fn effective_p(&self, sweep_p: Option<f64>, default_p: f64) -> Option<f64> {
        match self {
            CriterionSpec::Pastis { p }
            | CriterionSpec::PastisDt { p }
            | CriterionSpec::PastisSigma { p } => Some(sweep_p.or(*p).unwrap_or(default_p)),
            _ => None,
        }
    }

    /// The scored criterion, `None` for stlsq which selects by thresholding.
    pub fn to_criterion(&self, p: Option<f64>) -> Option<Criterion<f64>> {
        match *self {
            CriterionSpec::Aic => Some(Criterion::Aic),
            CriterionSpec::Bic => Some(Criterion::Bic),
            CriterionSpec::Ebic { gamma } => Some(Criterion::Ebic { gamma }),
            CriterionSpec::Cv { folds } => Some(Criterion::Cv { folds }),
            CriterionSpec::Pastis { .. } => Some(Criterion::Pastis {
                p: p.unwrap_or(DEFAULT_P),
            }),
            CriterionSpec::PastisDt { .. } => Some(Criterion::PastisDt {
                p: p.unwrap_or(DEFAULT_P),
            }),
            CriterionSpec::PastisSigma { .. } => Some(Criterion::PastisSigma {
                p: p.unwrap_or(DEFAULT_P),
            }),
            CriterionSpec::Stlsq { .. } => None,
        }
    }

    /// Command-line form, with hyperparameters supplied by dedicated flags.
    pub fn parse_flag(
        name: &str,
        p: f64,
        folds: usize,
        gamma: f64,
        threshold: f64,
    ) -> Result<Self> {
        match name {
            "aic" => Ok(CriterionSpec::Aic),
            "bic" => Ok(CriterionSpec::Bic),
            "ebic" => Ok(CriterionSpec::Ebic { gamma }),
            "cv" => Ok(CriterionSpec::Cv { folds }),
            "pastis" => Ok(CriterionSpec::Pastis { p: Some(p) }),
            "pastis-dt" => Ok(CriterionSpec::PastisDt { p: Some(p) }),
            "pastis-sigma" => Ok(CriterionSpec::PastisSigma { p: Some(p) }),
            "stlsq" => Ok(CriterionSpec::Stlsq { threshold }),
            _ => Err(Error::InvalidParameter {
                reason: format!(
                    "unknown criterion `{name}` (expected aic, bic, ebic, cv, pastis, \
                     pastis-dt, pastis-sigma, or stlsq)"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    Dt,
    Sigma,
    P,
}

/// Estimator used when refitting a chosen model; each brings the diffusion
/// estimator it is consistent with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    #[default]
    Aml,
    Trapeze,
    Shift,
    Stratonovich,
}

impl EstimatorName {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorName::Aml => "aml",
            EstimatorName::Trapeze => "trapeze",
            EstimatorName::Shift => "shift",
            EstimatorName::Stratonovich => "stratonovich",
        }
    }
}

/// One sweep point: the config defaults with the axis value substituted.
#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub tau: f64,
    pub dt: f64,
    pub sigma: f64,
    /// Set only on a `p` sweep.
    pub p: Option<f64>,
}

impl Point {
    pub fn at(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Self {
        let mut point = Point {
            tau: cfg.tau,
            dt: cfg.dt,
            sigma: cfg.sigma,
            p: None,
        };
        match axis {
            SweepAxis::Tau => point.tau = value,
            SweepAxis::Dt => point.dt = value,
            SweepAxis::Sigma => point.sigma = value,
            SweepAxis::P => point.p = Some(value),
        }
        point
    }
}
