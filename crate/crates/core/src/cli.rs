//! Command-line front end. Exit codes: 0 success, 1 configuration or input
//! error, 2 runtime failure (divergence and the like).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::adaptive::{self, window_mean, Phase};
use crate::config::{load_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::localization::Radii;
use crate::output::{self, emit_results, RunArtifacts};

/// Overrides the output directory from the config file; `--out` wins over it.
pub const OUT_DIR_ENV: &str = "ADALOC_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "adaloc", version, about = "EnKF with learned adaptive localization on Lorenz-96")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file, or a meta.json from an earlier run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config and the environment.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Training-phase winner search, forest fit, test-phase prediction.
    RunAdaptive {
        #[command(flatten)]
        common: Common,
    },
    /// Baseline run with a constant localization radius.
    RunFixed {
        #[command(flatten)]
        common: Common,
        /// Radius to use instead of `localization.fixed_radius`.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Run every scalar pool radius as a fixed radius and report the best.
    SweepFixed {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a forest from training.csv files written by earlier runs.
    TrainOffline {
        #[command(flatten)]
        common: Common,
        /// One or more training.csv files; rows are concatenated.
        #[arg(long = "training", value_name = "CSV", required = true, num_args = 1..)]
        training: Vec<PathBuf>,
    },
    /// Predict snapped radii for feature rows with a saved forest.
    Predict {
        #[command(flatten)]
        common: Common,
        /// forest.json written by run-adaptive or train-offline
        #[arg(long, value_name = "PATH")]
        forest: PathBuf,
        /// CSV of feature rows; columns are matched by the forest's feature names.
        #[arg(long, value_name = "CSV")]
        features: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.experiment.out_dir));
    cfg.experiment.out_dir = out.to_string_lossy().into_owned();
    cfg.validate()?;
    Ok((cfg, out))
}

fn input_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
            Error::config(path.display().to_string(), e.to_string())
        }
        other => other,
    }
}

fn run_adaptive(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let run = adaptive::run_experiment(&cfg)?;
    emit_results(
        &out,
        &cfg,
        "run-adaptive",
        &RunArtifacts {
            results: Some(&run.results),
            records: Some(&run.records),
            forest: Some(&run.forest),
            layout: Some(&run.layout),
            sweep: None,
        },
    )?;
    let test: Vec<_> = run.results.iter().filter(|r| r.phase == Phase::Testing).collect();
    let mean = test.iter().map(|r| r.analysis_rmse_true).sum::<f64>() / test.len().max(1) as f64;
    writeln!(stdout, "training records: {}", run.records.len())?;
    writeln!(stdout, "test-phase mean analysis RMSE: {mean:.6}")?;
    writeln!(stdout, "wrote {}", out.display())?;
    Ok(())
}

fn run_fixed(common: &Common, radius: Option<f64>, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let r = radius.unwrap_or(cfg.localization.fixed_radius);
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::config("--radius", format!("must be > 0, got {r}")));
    }
    let results = adaptive::run_fixed_radius(&cfg, &Radii::Scalar(r))?;
    emit_results(
        &out,
        &cfg,
        "run-fixed",
        &RunArtifacts {
            results: Some(&results),
            ..Default::default()
        },
    )?;
    let start = cfg.model.n_cycles / 2 + 1;
    writeln!(
        stdout,
        "radius {r}: mean analysis RMSE over cycles {start}..{}: {:.6}",
        cfg.model.n_cycles,
        window_mean(&results, start, |c| c.analysis_rmse_true)
    )?;
    writeln!(stdout, "wrote {}", out.display())?;
    Ok(())
}

fn sweep(common: &Common, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let sweep = adaptive::sweep_fixed(&cfg)?;
    emit_results(
        &out,
        &cfg,
        "sweep-fixed",
        &RunArtifacts {
            sweep: Some(&sweep),
            ..Default::default()
        },
    )?;
    writeln!(stdout, "radius,mean_analysis_rmse")?;
    for e in &sweep.entries {
        match e.mean_analysis_rmse {
            Some(m) => writeln!(stdout, "{},{m:.6}", e.radius)?,
            None => writeln!(stdout, "{},diverged", e.radius)?,
        }
    }
    writeln!(stdout, "best radius: {}", sweep.best_radius)?;
    Ok(())
}

fn train_offline(common: &Common, paths: &[PathBuf], stdout: &mut dyn Write) -> Result<()> {
    let (cfg, out) = resolve(common)?;
    let mut tables = Vec::with_capacity(paths.len());
    for p in paths {
        tables.push(output::read_training_csv(p).map_err(|e| input_error(p, e))?);
    }
    let names = tables[0].feature_names.clone();
    if let Some((p, _)) = paths.iter().zip(&tables).find(|(_, t)| t.feature_names != names || t.y.ncols() != tables[0].y.ncols()) {
        return Err(Error::config(p.display().to_string(), "columns differ from the first training file"));
    }
    let n_rows: usize = tables.iter().map(|t| t.x.nrows()).sum();
    let stack = |pick: fn(&output::TrainingTable) -> &DMatrix<f64>| {
        let cols = pick(&tables[0]).ncols();
        let mut m = DMatrix::zeros(n_rows, cols);
        let mut r0 = 0;
        for t in &tables {
            let part = pick(t);
            m.rows_mut(r0, part.nrows()).copy_from(part);
            r0 += part.nrows();
        }
        m
    };
    let x = stack(|t| &t.x);
    let y = stack(|t| &t.y);
    let forest = Forest::fit(&x, &y, &cfg.forest_config())
        .map_err(|e| match e {
            Error::Parameter(m) => Error::config("forest", m),
            other => other,
        })?
        .with_feature_names(names)?;
    emit_results(
        &out,
        &cfg,
        "train-offline",
        &RunArtifacts {
            forest: Some(&forest),
            ..Default::default()
        },
    )?;
    writeln!(stdout, "fitted {} trees on {n_rows} rows, {} features", forest.trees.len(), forest.n_features)?;
    writeln!(stdout, "wrote {}", out.display())?;
    Ok(())
}

fn predict(common: &Common, forest_path: &Path, features: &Path, stdout: &mut dyn Write) -> Result<()> {
    let (cfg, _) = resolve(common)?;
    let text = std::fs::read_to_string(forest_path).map_err(|e| input_error(forest_path, e.into()))?;
    let forest = Forest::from_json(&text).map_err(|e| input_error(forest_path, e))?;
    let pool = cfg.pool();
    let k = cfg.model.k;
    if forest.n_targets != pool.n_targets(k) {
        return Err(Error::config(
            "pool.mode",
            format!(
                "forest predicts {} value(s) per row but the pool expects {}",
                forest.n_targets,
                pool.n_targets(k)
            ),
        ));
    }
    let rows = output::read_feature_rows(features, &forest.feature_names).map_err(|e| input_error(features, e))?;
    if rows.ncols() != forest.n_features {
        return Err(Error::config(
            features.display().to_string(),
            format!("expected {} feature columns, got {}", forest.n_features, rows.ncols()),
        ));
    }
    let raw = forest.predict_rows(&rows)?;
    if forest.n_targets == 1 {
        writeln!(stdout, "row,radius")?;
    } else {
        let cols: Vec<String> = (0..forest.n_targets).map(|i| format!("r[{i}]")).collect();
        writeln!(stdout, "row,{}", cols.join(","))?;
    }
    for r in 0..raw.nrows() {
        let p: Vec<f64> = raw.row(r).iter().copied().collect();
        let vals: Vec<String> = pool.snap(&p, k)?.as_vec(forest.n_targets).iter().map(|v| v.to_string()).collect();
        writeln!(stdout, "{},{}", r + 1, vals.join(","))?;
    }
    Ok(())
}

/// Map an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    let result = match &cli.command {
        Command::RunAdaptive { common } => run_adaptive(common, &mut stdout),
        Command::RunFixed { common, radius } => run_fixed(common, *radius, &mut stdout),
        Command::SweepFixed { common } => sweep(common, &mut stdout),
        Command::TrainOffline { common, training } => train_offline(common, training, &mut stdout),
        Command::Predict {
            common,
            forest,
            features,
        } => predict(common, forest, features, &mut stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
