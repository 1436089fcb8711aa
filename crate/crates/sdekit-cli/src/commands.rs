//! The single-shot verbs: simulate, fit, select, evt-check.
//!
//! All of them funnel their outcome into one JSON document or one small CSV,
//! print a human summary line to stderr, and leave stdout to the data when
//! no --out path is given.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use sdekit::basis::{BasisLibrary, ModelBasis};
use sdekit::estimators::{
    diffusion_simple, diffusion_three_point, diffusion_vestergaard, fit_aml, fit_shift,
    fit_stratonovich, fit_trapeze, FitResult,
};
use sdekit::rng::rng_for;
use sdekit::sde::{simulate, BurnIn};
use sdekit::selection::{
    accuracy, greedy_search, gumbel_location, ks_statistic, max_gain_cdf, stlsq, AccuracyReport,
    GumbelOrder,
};
use sdekit::spde::{simulate_gray_scott, GrayScottParams, GridSpec, InitialCondition};
use sdekit::{Error, Result, Trajectory64};

use crate::config::{
    stride_of, CriterionSpec, EstimatorName, ExperimentConfig, LibrarySpec, SystemSpec,
};

/// Iteration cap for the thresholding loop; it converges in a handful of
/// passes or not at all.
pub const STLSQ_MAX_ITER: usize = 20;

/// Rewraps an IO failure so the message names the file involved.
pub fn at_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )),
        other => other,
    }
}

/// Everything `make_trajectory` needs besides the seed, borrowed from the
/// config so benchmark points can substitute their own values.
pub struct Recipe<'a> {
    pub system: &'a SystemSpec,
    pub tau: f64,
    pub dt: f64,
    pub sim_dt: Option<f64>,
    pub sigma: f64,
    pub burn_steps: Option<usize>,
}

impl<'a> Recipe<'a> {
    pub fn from_config(cfg: &'a ExperimentConfig) -> Self {
        Recipe {
            system: &cfg.system,
            tau: cfg.tau,
            dt: cfg.dt,
            sim_dt: cfg.sim_dt,
            sigma: cfg.sigma,
            burn_steps: cfg.burn_steps,
        }
    }
}

/// Facts about the integration that the samples alone cannot show.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SimExtras {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability_warning: Option<bool>,
}

/// Integrates the system, thins to the sampling interval, and corrupts with
/// measurement noise, reusing `seed` across the independent generator
/// streams involved.
pub fn make_trajectory(recipe: &Recipe, seed: u64) -> Result<(Trajectory64, SimExtras)> {
    let sim_dt = recipe.sim_dt.unwrap_or(recipe.dt);
    let stride = stride_of(recipe.dt, sim_dt)?;
    let burn = recipe
        .burn_steps
        .map(BurnIn::Steps)
        .unwrap_or(BurnIn::Default);
    let (mut traj, extras) = if recipe.system.is_grid() {
        let grid = recipe.system.grid()?;
        let n_snapshots = (recipe.tau / recipe.dt).round() as usize;
        if n_snapshots == 0 {
            return Err(Error::InvalidParameter {
                reason: "tau spans less than one sampling interval".into(),
            });
        }
        let out = simulate_gray_scott(
            &GrayScottParams::paper(),
            &grid,
            &InitialCondition::Patch,
            sim_dt,
            n_snapshots,
            stride,
            seed,
            burn,
        )?;
        let extras = SimExtras {
            clamp_count: None,
            stability_warning: Some(out.stability_warning),
        };
        (out.fields.to_trajectory(), extras)
    } else {
        let (drift, noise, x0) = recipe.system.sde_parts()?;
        let n_steps = (recipe.tau / sim_dt).round() as usize;
        if n_steps < stride {
            return Err(Error::InvalidParameter {
                reason: "tau spans less than one sampling interval".into(),
            });
        }
        let sim = simulate(&drift, &noise, &x0, sim_dt, n_steps, seed, burn)?;
        let extras = SimExtras {
            clamp_count: Some(sim.clamp_count),
            stability_warning: None,
        };
        let traj = if stride > 1 {
            sim.trajectory.subsample(stride)?
        } else {
            sim.trajectory
        };
        (traj, extras)
    };
    if recipe.sigma > 0.0 {
        traj = traj.add_measurement_noise(recipe.sigma, seed)?;
    }
    Ok((traj, extras))
}

/// JSON sidecar written next to every trajectory CSV.
#[derive(Debug, Serialize)]
struct TrajectoryMeta<'a> {
    system: &'a SystemSpec,
    d: usize,
    rows: usize,
    dt: f64,
    sim_dt: f64,
    sigma: f64,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec<f64>>,
    #[serde(flatten)]
    extras: SimExtras,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate_common()?;
    let recipe = Recipe::from_config(cfg);
    let (traj, extras) = make_trajectory(&recipe, cfg.seed)?;
    traj.write_csv(&cfg.out).map_err(|e| at_path(e, &cfg.out))?;
    let sidecar = cfg.out.with_extension("json");
    let meta = TrajectoryMeta {
        system: &cfg.system,
        d: traj.dim(),
        rows: traj.len(),
        dt: traj.dt(),
        sim_dt: cfg.sim_dt.unwrap_or(cfg.dt),
        sigma: cfg.sigma,
        seed: cfg.seed,
        grid: traj.grid().copied(),
        extras,
    };
    let file = std::fs::File::create(&sidecar).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", sidecar.display()),
        ))
    })?;
    serde_json::to_writer_pretty(file, &meta)?;
    eprintln!(
        "wrote {} ({} rows, d = {}) and {}",
        cfg.out.display(),
        traj.len(),
        traj.dim(),
        sidecar.display()
    );
    Ok(())
}

/// Loads a trajectory CSV; for grid libraries the layout comes from the
/// sidecar `simulate` left next to the samples.
pub fn load_trajectory(path: &Path, library: &LibrarySpec) -> Result<Trajectory64> {
    let traj = Trajectory64::read_csv(path).map_err(|e| at_path(e, path))?;
    if matches!(library, LibrarySpec::GrayScott) {
        let sidecar = path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!(
                    "{}: {e} (grid data needs the simulate sidecar for its layout)",
                    sidecar.display()
                ),
            ))
        })?;
        let meta: serde_json::Value = serde_json::from_str(&text)?;
        let grid: GridSpec<f64> = serde_json::from_value(
            meta.get("grid")
                .cloned()
                .ok_or_else(|| Error::InvalidParameter {
                    reason: format!("{}: sidecar has no grid block", sidecar.display()),
                })?,
        )?;
        if 2 * grid.cells() != traj.dim() {
            return Err(Error::DimensionMismatch {
                what: "grid layout for stored rows",
                expected: 2 * grid.cells(),
                got: traj.dim(),
            });
        }
        return Ok(traj.with_grid(grid));
    }
    Ok(traj)
}

pub fn build_library(spec: &LibrarySpec, traj: &Trajectory64) -> Result<BasisLibrary> {
    spec.build(traj.dim())
}

/// Parses `full` or a comma list of basis indices into a model.
pub fn parse_model(text: &str, n0: usize) -> Result<ModelBasis> {
    if text == "full" {
        return Ok(ModelBasis::full(n0));
    }
    let mut indices = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let idx = part.parse::<usize>().map_err(|_| Error::InvalidParameter {
            reason: format!("bad basis index `{part}`"),
        })?;
        if idx >= n0 {
            return Err(Error::InvalidParameter {
                reason: format!("basis index {idx} out of range for a library of {n0}"),
            });
        }
        indices.push(idx);
    }
    if indices.is_empty() {
        return Err(Error::InvalidParameter {
            reason: "model needs at least one basis index".into(),
        });
    }
    Ok(indices.into_iter().collect())
}

/// Refits `model` with the requested estimator and its matching diffusion
/// estimate.
pub fn refit(
    traj: &Trajectory64,
    library: &BasisLibrary,
    model: &ModelBasis,
    estimator: EstimatorName,
) -> Result<FitResult<f64>> {
    match estimator {
        EstimatorName::Aml => fit_aml(traj, library, model, &diffusion_simple(traj)?),
        EstimatorName::Trapeze => fit_trapeze(traj, library, model, &diffusion_three_point(traj)?),
        EstimatorName::Shift => fit_shift(traj, library, model, &diffusion_vestergaard(traj)?),
        EstimatorName::Stratonovich => fit_stratonovich(traj, library, model),
    }
}

/// Writes pretty JSON to `out`, or to stdout when no path is given.
fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", path.display()),
                ))
            })?;
            serde_json::to_writer_pretty(file, value)?;
            Ok(())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    library: &'a LibrarySpec,
    estimator: &'static str,
    #[serde(flatten)]
    fit: &'a FitResult<f64>,
}

pub fn cmd_fit(
    traj_path: &Path,
    library: &LibrarySpec,
    model_text: &str,
    estimator: EstimatorName,
    out: Option<&Path>,
) -> Result<()> {
    let traj = load_trajectory(traj_path, library)?;
    let lib = build_library(library, &traj)?;
    let model = parse_model(model_text, lib.len())?;
    let fit = refit(&traj, &lib, &model, estimator)?;
    let report = FitReport {
        library,
        estimator: estimator.label(),
        fit: &fit,
    };
    emit_json(&report, out)?;
    eprintln!(
        "fitted {} coefficients on {} rows (log-likelihood {:.6})",
        fit.model.len(),
        traj.len(),
        fit.log_likelihood
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SelectReport {
    criterion: &'static str,
    chosen: Vec<usize>,
    /// Criterion value of the chosen model; absent for stlsq.
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    /// Log-likelihood of the refit under the requested estimator.
    loglik: f64,
    coefficients: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<AccuracyReport<f64>>,
    /// Accepted states across all restarts; absent for stlsq.
    #[serde(skip_serializing_if = "Option::is_none")]
    trace_states: Option<usize>,
    rows: usize,
    seed: u64,
    wall_ms: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_select(
    traj_path: &Path,
    library: &LibrarySpec,
    spec: CriterionSpec,
    estimator: EstimatorName,
    truth_text: Option<&str>,
    seed: u64,
    p: f64,
    out: Option<&Path>,
) -> Result<()> {
    let traj = load_trajectory(traj_path, library)?;
    let lib = build_library(library, &traj)?;
    let truth = truth_text
        .map(|t| parse_model(t, lib.len()))
        .transpose()?;
    let started = Instant::now();
    let (chosen, score, trace_states) = match spec {
        CriterionSpec::Stlsq { threshold } => {
            (stlsq(&traj, &lib, threshold, STLSQ_MAX_ITER)?, None, None)
        }
        _ => {
            let criterion = spec
                .to_criterion(spec.effective_p(None, p))
                .expect("non-stlsq specs always map to a criterion");
            criterion.validate()?;
            let result = greedy_search(&traj, &lib, &criterion, seed)?;
            let states = result.trace.iter().map(Vec::len).sum();
            (result.chosen, Some(result.score), Some(states))
        }
    };
    let fit = refit(&traj, &lib, &chosen, estimator)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let report = SelectReport {
        criterion: spec.label(),
        chosen: chosen.indices().to_vec(),
        score,
        loglik: fit.log_likelihood,
        coefficients: fit.coefficients.clone(),
        accuracy: truth.as_ref().map(|t| accuracy(&chosen, t)),
        trace_states,
        rows: traj.len(),
        seed,
        wall_ms,
    };
    emit_json(&report, out)?;
    eprintln!(
        "{} chose {:?} in {:.0} ms",
        spec.label(),
        chosen.indices(),
        wall_ms
    );
    Ok(())
}

/// Generator stream for the synthetic gain draws; distinct from the
/// streams the library reserves for integration and search.
const EVT_STREAM: u64 = 64;

/// Monte-Carlo check of the maximum-spurious-gain law: for each candidate
/// count, draws `runs` maxima of n half-chi-square gains and compares them
/// with the exact CDF and both Gumbel approximations.
pub fn cmd_evt_check(ns: &[usize], runs: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if ns.is_empty() {
        return Err(Error::InvalidParameter {
            reason: "need at least one candidate count".into(),
        });
    }
    if runs == 0 {
        return Err(Error::InvalidParameter {
            reason: "runs must be at least 1".into(),
        });
    }
    if runs < 100 {
        eprintln!(
            "warning: {runs} runs is far below the 100 needed for stable tail \
             statistics; KS values will be noisy"
        );
    }
    let mut rng = rng_for(seed, EVT_STREAM);
    let mut lines = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(Error::InvalidParameter {
                reason: "candidate counts must be positive".into(),
            });
        }
        let samples: Vec<f64> = (0..runs)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.5 * z * z
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / runs as f64;
        let loc_first = gumbel_location::<f64>(n, GumbelOrder::First)?;
        let loc_refined = gumbel_location::<f64>(n, GumbelOrder::Refined)?;
        let ks_exact = ks_statistic(&samples, |z| {
            max_gain_cdf(z, n).expect("maxima of squares are non-negative")
        })?;
        let ks_first = ks_statistic(&samples, |z| gumbel_cdf(z, loc_first))?;
        let ks_refined = ks_statistic(&samples, |z| gumbel_cdf(z, loc_refined))?;
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        lines.push(EvtRow {
            n,
            runs,
            mean,
            mean_gumbel_first: loc_first + EULER_GAMMA,
            mean_gumbel_refined: loc_refined + EULER_GAMMA,
            ks_exact,
            ks_gumbel_first: ks_first,
            ks_gumbel_refined: ks_refined,
        });
    }
    let mut text = String::from(
        "n,runs,mean,mean_gumbel_first,mean_gumbel_refined,ks_exact,ks_gumbel_first,ks_gumbel_refined\n",
    );
    for row in &lines {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.n,
            row.runs,
            row.mean,
            row.mean_gumbel_first,
            row.mean_gumbel_refined,
            row.ks_exact,
            row.ks_gumbel_first,
            row.ks_gumbel_refined
        ));
        eprintln!(
            "n = {:>4}: mean {:.4} (gumbel first {:.4}, refined {:.4}) \
             ks exact {:.4}, first {:.4}, refined {:.4}",
            row.n,
            row.mean,
            row.mean_gumbel_first,
            row.mean_gumbel_refined,
            row.ks_exact,
            row.ks_gumbel_first,
            row.ks_gumbel_refined
        );
    }
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

struct EvtRow {
    n: usize,
    runs: usize,
    mean: f64,
    mean_gumbel_first: f64,
    mean_gumbel_refined: f64,
    ks_exact: f64,
    ks_gumbel_first: f64,
    ks_gumbel_refined: f64,
}

/// Standard Gumbel CDF with unit scale at the given location.
fn gumbel_cdf(z: f64, location: f64) -> f64 {
    (-(-(z - location)).exp()).exp()
}

/// Derives the data seed for one (sweep point, run) pair from the master
/// seed. Linear in the task index, so no two tasks of a sweep collide.
pub fn run_seed(master: u64, point: usize, runs: usize, run: usize) -> u64 {
    master
        .wrapping_add((point as u64).wrapping_mul(runs as u64))
        .wrapping_add(run as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_parsing_round_trips_and_rejects_garbage() {
        let m = parse_model("0, 2,5", 6).unwrap();
        assert_eq!(m.indices(), &[0, 2, 5]);
        assert_eq!(parse_model("full", 4).unwrap().len(), 4);
        assert!(parse_model("7", 6).is_err());
        assert!(parse_model("a,b", 6).is_err());
        assert!(parse_model("", 6).is_err());
    }

    #[test]
    fn run_seeds_are_distinct_across_a_sweep() {
        let mut seen = std::collections::HashSet::new();
        for point in 0..4 {
            for run in 0..5 {
                assert!(seen.insert(run_seed(9, point, 5, run)));
            }
        }
    }

    #[test]
    fn gumbel_cdf_is_a_cdf() {
        let lo = gumbel_cdf(0.0, 2.0);
        let hi = gumbel_cdf(10.0, 2.0);
        assert!(lo > 0.0 && lo < hi && hi < 1.0);
        assert!((gumbel_cdf(2.0, 2.0) - (-1.0f64).exp().exp().recip()).abs() < 1e-12);
    }

    #[test]
    fn io_errors_name_the_path() {
        let missing = Path::new("/no/such/dir/file.csv");
        let err = load_trajectory(&missing, &LibrarySpec::Polynomial { degree: 2 }).unwrap_err();
        assert!(err.to_string().contains("/no/such/dir/file.csv"));
    }
}
