//! The sweep engine behind `benchmark`.
//!
//! Tasks are (sweep point, run) pairs. A pool of workers simulates and
//! selects independently; one sink thread owns the CSV and writes rows in
//! (point index, run) order, flushing after every task so an interrupted
//! sweep still leaves a valid partial file. Seeds derive from the master
//! seed and the task index alone, so the output is independent of thread
//! count and scheduling.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use sdekit::basis::{BasisLibrary, ModelBasis};
use sdekit::estimators::drift_error;
use sdekit::selection::{accuracy, greedy_search, stlsq, AccuracyReport};
use sdekit::{Error, Result};

use crate::commands::{make_trajectory, refit, run_seed, Recipe, STLSQ_MAX_ITER};
use crate::config::{CriterionSpec, ExperimentConfig, Point};

pub const CSV_HEADER: &str =
    "system,criterion,tau,dt,sigma,p,seed,exact_match,tp,fp,fn,prediction_error,loglik,wall_ms";

/// One CSV row: one criterion on one trajectory. Optional columns print as
/// empty fields.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub criterion: &'static str,
    pub tau: f64,
    pub dt: f64,
    pub sigma: f64,
    pub p: Option<f64>,
    pub seed: u64,
    pub exact_match: Option<bool>,
    pub tp: Option<f64>,
    pub fp: Option<f64>,
    pub fnr: Option<f64>,
    pub prediction_error: Option<f64>,
    pub loglik: Option<f64>,
    pub wall_ms: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Formats one line; `seed` is a label so aggregate rows can write
/// `mean` and `se` in the same column.
#[allow(clippy::too_many_arguments)]
fn csv_line(
    system: &str,
    criterion: &str,
    tau: f64,
    dt: f64,
    sigma: f64,
    p: Option<f64>,
    seed: &str,
    stats: [Option<f64>; 7],
) -> String {
    let [exact, tp, fp, fnr, pe, ll, wall] = stats;
    format!(
        "{system},{criterion},{tau},{dt},{sigma},{},{seed},{},{},{},{},{},{},{}",
        opt(p),
        opt(exact),
        opt(tp),
        opt(fp),
        opt(fnr),
        opt(pe),
        opt(ll),
        opt(wall),
    )
}

impl ResultRow {
    fn line(&self, system: &str) -> String {
        csv_line(
            system,
            self.criterion,
            self.tau,
            self.dt,
            self.sigma,
            self.p,
            &self.seed.to_string(),
            [
                self.exact_match.map(|b| if b { 1.0 } else { 0.0 }),
                self.tp,
                self.fp,
                self.fnr,
                self.prediction_error,
                self.loglik,
                Some(self.wall_ms),
            ],
        )
    }
}

/// Simulates one trajectory and races every criterion on it.
fn run_task(
    cfg: &ExperimentConfig,
    library: &BasisLibrary,
    truth: Option<&(ModelBasis, Vec<f64>)>,
    point: &Point,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let recipe = Recipe {
        system: &cfg.system,
        tau: point.tau,
        dt: point.dt,
        sim_dt: cfg.sim_dt,
        sigma: point.sigma,
        burn_steps: cfg.burn_steps,
    };
    let (traj, _) = make_trajectory(&recipe, seed)?;
    let mut rows = Vec::with_capacity(cfg.criteria.len());
    for spec in &cfg.criteria {
        let started = Instant::now();
        let eff_p = spec.effective_p(point.p, cfg.p);
        let chosen = match spec {
            CriterionSpec::Stlsq { threshold } => {
                stlsq(&traj, library, *threshold, STLSQ_MAX_ITER)?
            }
            _ => {
                let criterion = spec
                    .to_criterion(eff_p)
                    .expect("non-stlsq specs always map to a criterion");
                greedy_search(&traj, library, &criterion, seed)?.chosen
            }
        };
        // A failed refit costs this row its error columns, not the sweep.
        let fit = refit(&traj, library, &chosen, cfg.estimator);
        let loglik = fit.as_ref().ok().map(|f| f.log_likelihood);
        let prediction_error = match (&fit, truth) {
            (Ok(f), Some((bstar, astar))) => {
                drift_error(f, bstar, astar, &traj, library, &f.diffusion)
                    .ok()
                    .map(|r| r.raw)
            }
            _ => None,
        };
        let acc: Option<AccuracyReport<f64>> = truth.map(|(bstar, _)| accuracy(&chosen, bstar));
        rows.push(ResultRow {
            criterion: spec.label(),
            tau: point.tau,
            dt: point.dt,
            sigma: point.sigma,
            p: eff_p,
            seed,
            exact_match: acc.map(|a| a.exact_match),
            tp: acc.map(|a| a.true_positive),
            fp: acc.map(|a| a.false_positive),
            fnr: acc.map(|a| a.false_negative),
            prediction_error,
            loglik,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}

/// Sample mean and standard error over the present values; the mean needs
/// one value, the standard error two.
fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

fn column(rows: &[&ResultRow], get: impl Fn(&ResultRow) -> Option<f64>) -> Vec<f64> {
    rows.iter().filter_map(|r| get(r)).collect()
}

pub fn cmd_benchmark(cfg: &ExperimentConfig, threads: usize) -> Result<()> {
    let sweep = cfg.validate_sweep()?;
    let points: Vec<Point> = sweep
        .values
        .iter()
        .map(|&v| Point::at(cfg, sweep.axis, v))
        .collect();
    let library = cfg.library.build(cfg.system.dim()?)?;
    let truth = cfg.system.truth(&library).ok();
    let system_label = cfg.system.label();
    let runs = cfg.runs;
    let n_tasks = points.len() * runs;

    let file = std::fs::File::create(&cfg.out).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", cfg.out.display()),
        ))
    })?;
    let mut sink = BufWriter::new(file);
    writeln!(sink, "{CSV_HEADER}")?;
    sink.flush()?;

    eprintln!(
        "sweep: {} point(s) x {} run(s) x {} criteria on {} ({} threads)",
        points.len(),
        runs,
        cfg.criteria.len(),
        system_label,
        threads
    );

    let next_task = AtomicUsize::new(0);
    let mut stored: Vec<Option<Vec<ResultRow>>> = vec![None; n_tasks];
    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<ResultRow>>)>();

    let sink_result: Result<()> = std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            let tx = tx.clone();
            let next_task = &next_task;
            let points = &points;
            let library = &library;
            let truth = truth.as_ref();
            s.spawn(move || loop {
                let t = next_task.fetch_add(1, Ordering::Relaxed);
                if t >= n_tasks {
                    break;
                }
                let (pi, run) = (t / runs, t % runs);
                let seed = run_seed(cfg.seed, pi, runs, run);
                let result = run_task(cfg, library, truth, &points[pi], seed);
                if tx.send((t, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Reorder buffer: rows leave in task order no matter which worker
        // finishes first, and each task's rows are flushed immediately.
        // Owning the receiver here closes the channel on an early error,
        // which stops the workers instead of letting them finish the sweep.
        let rx = rx;
        let mut pending: BTreeMap<usize, Result<Vec<ResultRow>>> = BTreeMap::new();
        let mut next_write = 0usize;
        for (t, result) in rx.iter() {
            pending.insert(t, result);
            while let Some(result) = pending.remove(&next_write) {
                let rows = result?;
                for row in &rows {
                    writeln!(sink, "{}", row.line(&system_label))?;
                }
                sink.flush()?;
                stored[next_write] = Some(rows);
                next_write += 1;
                if next_write % runs == 0 {
                    eprintln!("point {}/{} complete", next_write / runs, points.len());
                }
            }
        }
        Ok(())
    });
    sink_result?;

    // Aggregate block: per (point, criterion), the sample mean and standard
    // error over runs of every numeric column, computed from exactly the
    // rows written above.
    for pi in 0..points.len() {
        for (ci, spec) in cfg.criteria.iter().enumerate() {
            let rows: Vec<&ResultRow> = (0..runs)
                .map(|r| &stored[pi * runs + r].as_ref().expect("all tasks completed")[ci])
                .collect();
            let groups = [
                column(&rows, |r| r.exact_match.map(|b| if b { 1.0 } else { 0.0 })),
                column(&rows, |r| r.tp),
                column(&rows, |r| r.fp),
                column(&rows, |r| r.fnr),
                column(&rows, |r| r.prediction_error),
                column(&rows, |r| r.loglik),
                column(&rows, |r| Some(r.wall_ms)),
            ];
            let stats: Vec<(Option<f64>, Option<f64>)> =
                groups.iter().map(|vals| mean_se(vals)).collect();
            let point = &points[pi];
            let p = rows[0].p;
            for (label, pick) in [("mean", 0usize), ("se", 1usize)] {
                let cols: [Option<f64>; 7] = std::array::from_fn(|i| {
                    if pick == 0 {
                        stats[i].0
                    } else {
                        stats[i].1
                    }
                });
                writeln!(
                    sink,
                    "{}",
                    csv_line(
                        &system_label,
                        spec.label(),
                        point.tau,
                        point.dt,
                        point.sigma,
                        p,
                        label,
                        cols,
                    )
                )?;
            }
        }
    }
    sink.flush()?;
    eprintln!(
        "wrote {} result rows and {} aggregate rows to {}",
        n_tasks * cfg.criteria.len(),
        2 * points.len() * cfg.criteria.len(),
        cfg.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_print_empty() {
        let line = csv_line(
            "ou3",
            "aic",
            10.0,
            0.01,
            0.0,
            None,
            "3",
            [Some(1.0), Some(0.5), None, None, None, Some(-2.25), None],
        );
        assert_eq!(line, "ou3,aic,10,0.01,0,,3,1,0.5,,,,-2.25,");
    }

    #[test]
    fn mean_se_handles_short_columns() {
        assert_eq!(mean_se(&[]), (None, None));
        assert_eq!(mean_se(&[2.0]), (Some(2.0), None));
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((se.unwrap() - 1.0).abs() < 1e-12);
    }
}
