//! Result files. Every file is written to a temporary sibling and renamed into
//! place, so a failed run never leaves a half-written file behind.
//!
//! | file              | contents                                            |
//! |-------------------|-----------------------------------------------------|
//! | `cycles.csv`      | one row per cycle: phase, radius summary, RMSEs     |
//! | `radii.csv`       | full radius vector used at each cycle               |
//! | `importances.csv` | forest feature importances, descending              |
//! | `training.csv`    | training records (features and winner radius)      |
//! | `forest.json`     | serialized forest                                   |
//! | `meta.json`       | config echo, feature layout, seed, columns, version |

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::adaptive::{CycleResult, SweepResult, TrainingRecord};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::forest::Forest;
use crate::localization::Radii;

pub const RUN_FORMAT: &str = "adaloc-run";
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CYCLES_COLUMNS: [&str; 13] = [
    "cycle",
    "phase",
    "radius_mean",
    "radius_std",
    "forecast_rmse_true",
    "forecast_rmse_obs",
    "analysis_rmse_true",
    "analysis_rmse_obs",
    "log_forecast_rmse_true",
    "log_analysis_rmse_true",
    "analysis_kl",
    "criterion",
    "n_radii",
];

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn cycles_csv(results: &[CycleResult]) -> Result<Vec<u8>> {
    let header: Vec<String> = CYCLES_COLUMNS.iter().map(|s| s.to_string()).collect();
    csv_bytes(
        &header,
        results.iter().map(|r| {
            let (mean, std) = r.radius_used.summary();
            let n_radii = match &r.radius_used {
                Radii::Scalar(_) => 1,
                Radii::PerVariable(v) => v.len(),
            };
            vec![
                r.cycle.to_string(),
                r.phase.as_str().to_string(),
                num(mean),
                num(std),
                num(r.forecast_rmse_true),
                num(r.forecast_rmse_obs),
                num(r.analysis_rmse_true),
                num(r.analysis_rmse_obs),
                num(r.forecast_rmse_true.ln()),
                num(r.analysis_rmse_true.ln()),
                num(r.analysis_kl),
                num(r.criterion_value),
                n_radii.to_string(),
            ]
        }),
    )
}

pub fn radii_csv(results: &[CycleResult], n_state: usize) -> Result<Vec<u8>> {
    let mut header = vec!["cycle".to_string()];
    header.extend((0..n_state).map(|i| format!("r[{i}]")));
    csv_bytes(
        &header,
        results.iter().map(|r| {
            let mut row = vec![r.cycle.to_string()];
            row.extend(r.radius_used.as_vec(n_state).into_iter().map(num));
            row
        }),
    )
}

/// Importances sorted descending; equal values keep layout order.
pub fn importances_csv(forest: &Forest) -> Result<Vec<u8>> {
    let names: Vec<String> = if forest.feature_names.is_empty() {
        (0..forest.n_features).map(|i| format!("x{i}")).collect()
    } else {
        forest.feature_names.clone()
    };
    let mut order: Vec<usize> = (0..forest.n_features).collect();
    order.sort_by(|&a, &b| forest.importances[b].total_cmp(&forest.importances[a]));
    csv_bytes(
        &["feature".into(), "importance".into()],
        order
            .into_iter()
            .map(|i| vec![names[i].clone(), num(forest.importances[i])]),
    )
}

fn target_names(n_targets: usize) -> Vec<String> {
    if n_targets == 1 {
        vec!["target".into()]
    } else {
        (0..n_targets).map(|i| format!("target[{i}]")).collect()
    }
}

pub fn training_csv(records: &[TrainingRecord], layout: &FeatureLayout) -> Result<Vec<u8>> {
    let n_targets = records.first().map_or(1, |r| match &r.winner {
        Radii::Scalar(_) => 1,
        Radii::PerVariable(v) => v.len(),
    });
    let mut header = vec!["cycle".to_string(), "winner_cost".to_string()];
    header.extend(layout.names());
    header.extend(target_names(n_targets));
    csv_bytes(
        &header,
        records.iter().map(|r| {
            let mut row = vec![r.cycle.to_string(), num(r.winner_cost)];
            row.extend(r.features.values.iter().copied().map(num));
            match &r.winner {
                Radii::Scalar(v) => row.push(num(*v)),
                Radii::PerVariable(v) => row.extend(v.iter().copied().map(num)),
            }
            row
        }),
    )
}

pub fn sweep_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), num);
    csv_bytes(
        &["radius".into(), "mean_analysis_rmse".into(), "mean_forecast_rmse".into()],
        sweep.entries.iter().map(|e| {
            vec![num(e.radius), opt(e.mean_analysis_rmse), opt(e.mean_forecast_rmse)]
        }),
    )
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    format: &'static str,
    csv_schema_version: u32,
    version: &'static str,
    command: &'a str,
    seed: u64,
    n_train_cycles: usize,
    columns: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_layout: Option<&'a FeatureLayout>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<&'a SweepResult>,
    files: Vec<&'a str>,
    config: &'a ExperimentConfig,
}

/// What a command produced; absent parts are simply not written.
#[derive(Debug, Default)]
pub struct RunArtifacts<'a> {
    pub results: Option<&'a [CycleResult]>,
    pub records: Option<&'a [TrainingRecord]>,
    pub forest: Option<&'a Forest>,
    pub layout: Option<&'a FeatureLayout>,
    pub sweep: Option<&'a SweepResult>,
}

/// Write every available artifact plus `meta.json` into `dir`; returns the
/// paths written.
pub fn emit_results(
    dir: &Path,
    cfg: &ExperimentConfig,
    command: &str,
    art: &RunArtifacts<'_>,
) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    if let Some(results) = art.results {
        files.push(("cycles.csv", cycles_csv(results)?));
        files.push(("radii.csv", radii_csv(results, cfg.model.k)?));
    }
    if let (Some(records), Some(layout)) = (art.records, art.layout) {
        files.push(("training.csv", training_csv(records, layout)?));
    }
    if let Some(forest) = art.forest {
        files.push(("importances.csv", importances_csv(forest)?));
        files.push(("forest.json", forest.to_json()?.into_bytes()));
    }
    if let Some(sweep) = art.sweep {
        files.push(("sweep.csv", sweep_csv(sweep)?));
    }

    let columns = serde_json::json!({
        "cycles.csv": CYCLES_COLUMNS,
        "radii.csv": ["cycle", "r[0..n_state]"],
        "importances.csv": ["feature", "importance"],
        "training.csv": ["cycle", "winner_cost", "<feature names>", "target | target[0..n_state]"],
        "sweep.csv": ["radius", "mean_analysis_rmse", "mean_forecast_rmse"],
    });
    let mut names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    names.push("meta.json");
    let meta = Meta {
        format: RUN_FORMAT,
        csv_schema_version: CSV_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.experiment.seed,
        n_train_cycles: cfg.n_train(),
        columns,
        feature_layout: art.layout,
        sweep: art.sweep,
        files: names,
        config: cfg,
    };
    files.push(("meta.json", serde_json::to_vec_pretty(&meta)?));

    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Training data read back from `training.csv`.
#[derive(Debug, Clone)]
pub struct TrainingTable {
    pub feature_names: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("row {row}, column `{col}`: not a number: `{s}`")))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

/// Read a `training.csv`: features sit between `winner_cost` and the first
/// `target` column; `cycle` and `winner_cost` are optional.
pub fn read_training_csv(path: &Path) -> Result<TrainingTable> {
    let (header, rows) = read_table(path)?;
    let is_target = |h: &str| h == "target" || h.starts_with("target[");
    let target_cols: Vec<usize> = (0..header.len()).filter(|&i| is_target(&header[i])).collect();
    if target_cols.is_empty() {
        return Err(Error::Parse(format!("{}: no `target` column", path.display())));
    }
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&i| !is_target(&header[i]) && header[i] != "cycle" && header[i] != "winner_cost")
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Parse(format!("{}: no feature columns", path.display())));
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let grab = |cols: &[usize]| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (r, row) in rows.iter().enumerate() {
            for (c, &col) in cols.iter().enumerate() {
                m[(r, c)] = parse_f64(&row[col], r + 1, &header[col])?;
            }
        }
        Ok(m)
    };
    Ok(TrainingTable {
        feature_names: feature_cols.iter().map(|&i| header[i].clone()).collect(),
        x: grab(&feature_cols)?,
        y: grab(&target_cols)?,
    })
}

/// Read feature rows for prediction. With `names`, columns are picked by name
/// (extra columns are ignored); otherwise every column is a feature.
pub fn read_feature_rows(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let (header, rows) = read_table(path)?;
    let cols: Vec<usize> = if names.is_empty() {
        (0..header.len()).collect()
    } else {
        names
            .iter()
            .map(|n| {
                header.iter().position(|h| h == n).ok_or_else(|| {
                    Error::Parse(format!("{}: missing feature column `{n}`", path.display()))
                })
            })
            .collect::<Result<_>>()?
    };
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    for (r, row) in rows.iter().enumerate() {
        for (c, &col) in cols.iter().enumerate() {
            m[(r, c)] = parse_f64(&row[col], r + 1, &header[col])?;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::Phase;
    use crate::features::FeatureVector;
    use crate::forest::ForestConfig;

    fn result(cycle: usize, radius: Radii) -> CycleResult {
        CycleResult {
            cycle,
            phase: Phase::Training,
            radius_used: radius,
            forecast_rmse_true: 1.0,
            forecast_rmse_obs: 1.5,
            analysis_rmse_true: 0.5,
            analysis_rmse_obs: 0.75,
            analysis_kl: 0.01,
            criterion_value: 0.53,
        }
    }

    #[test]
    fn cycles_csv_has_header_plus_rows() {
        let rows: Vec<_> = (1..=5).map(|c| result(c, Radii::Scalar(4.0))).collect();
        let text = String::from_utf8(cycles_csv(&rows).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("cycle,phase,radius_mean"));
        let second: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(second[0], "1");
        assert_eq!(second[2], "4");
        assert_eq!(second[9].parse::<f64>().unwrap(), 0.5f64.ln());
    }

    #[test]
    fn radii_csv_expands_vectors() {
        let rows = vec![result(1, Radii::PerVariable(vec![1.0, 2.0, 3.0]))];
        let text = String::from_utf8(radii_csv(&rows, 3).unwrap()).unwrap();
        assert_eq!(text, "cycle,r[0],r[1],r[2]\n1,1,2,3\n");
    }

    #[test]
    fn training_csv_round_trips() {
        let layout = FeatureLayout::new(8, 4, 1).unwrap();
        let records: Vec<TrainingRecord> = (0..4)
            .map(|i| TrainingRecord {
                cycle: i + 1,
                features: FeatureVector {
                    values: (0..layout.len()).map(|j| (i * 10 + j) as f64 * 0.1).collect(),
                },
                winner: Radii::Scalar(i as f64 + 1.0),
                winner_cost: 0.5,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("training.csv");
        write_atomic(&path, &training_csv(&records, &layout).unwrap()).unwrap();
        let table = read_training_csv(&path).unwrap();
        assert_eq!(table.feature_names, layout.names());
        assert_eq!(table.x.shape(), (4, layout.len()));
        assert_eq!(table.y.column(0).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(table.x[(2, 3)], records[2].features.values[3]);

        let picked = read_feature_rows(&path, &table.feature_names).unwrap();
        assert_eq!(picked, table.x);
    }

    #[test]
    fn importances_sorted_and_normalized() {
        let x = DMatrix::from_fn(40, 3, |i, j| if j == 1 { i as f64 } else { ((i * 7 + j) % 5) as f64 });
        let y = DMatrix::from_fn(40, 1, |i, _| if i < 20 { 0.0 } else { 1.0 });
        let cfg = ForestConfig {
            n_trees: 5,
            ..Default::default()
        };
        let forest = Forest::fit(&x, &y, &cfg).unwrap();
        let text = String::from_utf8(importances_csv(&forest).unwrap()).unwrap();
        let vals: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(text.lines().nth(1).unwrap().starts_with("x1,"));
    }

    #[test]
    fn emit_writes_meta_that_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.seed = 17;
        let rows = vec![result(1, Radii::Scalar(4.0))];
        let art = RunArtifacts {
            results: Some(&rows),
            ..Default::default()
        };
        let written = emit_results(dir.path(), &cfg, "run-fixed", &art).unwrap();
        assert_eq!(written.len(), 3);
        let back = crate::config::load_config(&dir.path().join("meta.json")).unwrap();
        assert_eq!(back, cfg);
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 3);
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let cfg = ExperimentConfig::default();
        let err = emit_results(&blocker.join("sub"), &cfg, "run-fixed", &RunArtifacts::default());
        assert!(matches!(err, Err(Error::Io(_))));
    }
}
