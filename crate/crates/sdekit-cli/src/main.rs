//! Command-line front end: simulate trajectories, fit drift models, run
//! model selection, sweep benchmark grids, and sanity-check the extreme
//! value law the selection penalty rests on.
//!
//! Exit codes: 0 success, 2 usage or config errors, 3 data errors (missing
//! or malformed files, too little data), 4 numerical failures (divergent
//! integration, singular matrices). Failures print one JSON object to
//! stderr so scripts can branch on `error` without scraping text.

mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CriterionSpec, EstimatorName, ExperimentConfig, LibrarySpec};
use sdekit::Error;

#[derive(Parser)]
#[command(name = "sdekit", version, about = "SDE simulation, drift fitting, and model-selection benchmarks", max_term_width = 100)]
struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; overrides the config file's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for benchmark sweeps; defaults to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run sweeps at full published scale (the config's `paper` block)
    /// instead of desk scale.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Trajectory CSV, as written by `simulate`.
    #[arg(long)]
    traj: PathBuf,
    /// Candidate library: poly:DEGREE, lv, or gray-scott.
    #[arg(long)]
    library: String,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a system and write sample CSV plus a JSON sidecar.
    Simulate {
        /// Experiment config (JSON); the sweep block is ignored here.
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit drift coefficients for a fixed model on stored samples.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated basis indices, or `full`.
        #[arg(long, default_value = "full")]
        model: String,
        #[arg(long, value_enum, default_value_t = EstimatorName::Aml)]
        estimator: EstimatorName,
    },
    /// Search model space under one criterion and report the choice.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// aic, bic, ebic, cv, pastis, pastis-dt, pastis-sigma, or stlsq.
        #[arg(long)]
        criterion: String,
        /// Tail mass for the pastis family.
        #[arg(long, default_value_t = config::DEFAULT_P)]
        p: f64,
        /// Folds for cv.
        #[arg(long, default_value_t = 7)]
        folds: usize,
        /// Size-penalty weight for ebic, in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Coefficient threshold for stlsq.
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        /// Estimator for the final refit of the chosen model.
        #[arg(long, value_enum, default_value_t = EstimatorName::Aml)]
        estimator: EstimatorName,
        /// True model indices, e.g. `0,3,7`; enables the accuracy block.
        #[arg(long)]
        truth: Option<String>,
    },
    /// Sweep an experiment grid and stream per-seed result rows to CSV.
    Benchmark {
        /// Experiment config (JSON) with sweep and criteria blocks.
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare simulated maximum spurious gains with their predicted law.
    EvtCheck {
        /// Candidate counts to test.
        #[arg(long, value_delimiter = ',', default_values_t = vec![8, 91])]
        n: Vec<usize>,
        /// Monte-Carlo repetitions per count; fewer than 100 is allowed
        /// but warned about.
        #[arg(long, default_value_t = 500)]
        runs: usize,
    },
}

/// Maps every library error onto the documented exit classes, with a short
/// machine-readable tag for the stderr JSON.
fn exit_class(err: &Error) -> (u8, &'static str) {
    match err {
        Error::InvalidParameter { .. } => (2, "invalid_parameter"),
        Error::Unsupported { .. } => (2, "unsupported"),
        Error::Io(_) => (3, "io"),
        Error::Parse { .. } => (3, "parse"),
        Error::Json(_) => (3, "json"),
        Error::InsufficientData { .. } => (3, "insufficient_data"),
        Error::DimensionMismatch { .. } => (3, "dimension_mismatch"),
        Error::EmptyResult => (3, "empty_result"),
        Error::NotRepresentable { .. } => (3, "not_representable"),
        Error::NonFinite { .. } => (4, "non_finite"),
        Error::SingularGram => (4, "singular_gram"),
        Error::SingularWeight => (4, "singular_weight"),
        Error::DomainError { .. } => (4, "domain"),
    }
}

/// Loads a config and applies the global overrides, which win over the
/// file so one committed config serves many invocations.
fn load_config(path: &PathBuf, cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if cli.paper_scale {
        cfg.apply_paper_scale()?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate { config } => {
            let cfg = load_config(config, cli)?;
            commands::cmd_simulate(&cfg)
        }
        Command::Fit {
            data,
            model,
            estimator,
        } => {
            let library = LibrarySpec::parse_flag(&data.library)?;
            commands::cmd_fit(&data.traj, &library, model, *estimator, cli.out.as_deref())
        }
        Command::Select {
            data,
            criterion,
            p,
            folds,
            gamma,
            threshold,
            estimator,
            truth,
        } => {
            let library = LibrarySpec::parse_flag(&data.library)?;
            let spec = CriterionSpec::parse_flag(criterion, *p, *folds, *gamma, *threshold)?;
            commands::cmd_select(
                &data.traj,
                &library,
                spec,
                *estimator,
                truth.as_deref(),
                cli.seed.unwrap_or(0),
                *p,
                cli.out.as_deref(),
            )
        }
        Command::Benchmark { config } => {
            let cfg = load_config(config, cli)?;
            let threads = cli
                .threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if threads == 0 {
                return Err(Error::InvalidParameter {
                    reason: "threads must be at least 1".into(),
                });
            }
            bench::cmd_benchmark(&cfg, threads)
        }
        Command::EvtCheck { n, runs } => {
            commands::cmd_evt_check(n, *runs, cli.seed.unwrap_or(0), cli.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, tag) = exit_class(&err);
            eprintln!(
                "{}",
                serde_json::json!({ "error": tag, "message": err.to_string() })
            );
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_classes_cover_usage_data_and_numerics() {
        assert_eq!(
            exit_class(&Error::InvalidParameter { reason: "x".into() }).0,
            2
        );
        assert_eq!(
            exit_class(&Error::Parse {
                line: 3,
                reason: "x".into()
            })
            .0,
            3
        );
        assert_eq!(exit_class(&Error::SingularGram).0, 4);
        assert_eq!(exit_class(&Error::NonFinite { step: 9 }).0, 4);
    }

    #[test]
    fn cli_parses_the_documented_verbs() {
        Cli::try_parse_from([
            "sdekit",
            "select",
            "--traj",
            "x.csv",
            "--library",
            "poly:2",
            "--criterion",
            "pastis",
            "--seed",
            "7",
        ])
        .unwrap();
        Cli::try_parse_from(["sdekit", "evt-check", "--n", "8,91", "--runs", "200"]).unwrap();
        assert!(Cli::try_parse_from(["sdekit", "frobnicate"]).is_err());
    }
}
