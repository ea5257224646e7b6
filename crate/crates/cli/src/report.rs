//! CSV result tables, SVG plots and the run manifest.
//!
//! Everything written here is a function of the configs and seeds only;
//! wall-clock times go to a separate timings file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::plot::{line_plot, Series};
use crate::run::{create_dir, write_file, ResultRow};

/// One line of `<experiment>_results.csv`: a single `(config, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub method: String,
    pub axis: String,
    pub value: Option<f64>,
    pub architecture: String,
    pub seed: u64,
    pub config_hash: String,
    pub n: usize,
    pub m: usize,
    pub k: f64,
    pub s: f64,
    pub d: i32,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub t: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub success: f64,
    pub mse: f64,
    pub tau: f64,
    pub structural_error: f64,
    pub noiseless_structural_error: f64,
    pub ridge_applied: bool,
    pub condition: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// One line of `<experiment>_summary.csv`: seed means at one sweep point.
///
/// Rows from other methods can be appended to this file and are plotted as
/// extra series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub experiment: String,
    pub method: String,
    pub axis: String,
    pub value: Option<f64>,
    pub architecture: String,
    pub seeds: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub success: f64,
    pub mse: f64,
    pub structural_error: Option<f64>,
    pub noiseless_structural_error: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub axis: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestEntry>,
    pub files: Vec<String>,
}

fn axis_name(row: &ResultRow) -> String {
    row.axis.map_or("none", |a| a.name()).to_string()
}

pub fn run_records(rows: &[ResultRow]) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for row in rows {
        for r in &row.runs {
            let c = &r.config;
            out.push(RunRecord {
                experiment: row.experiment.clone(),
                method: row.method.clone(),
                axis: axis_name(row),
                value: row.value,
                architecture: row.architecture.clone(),
                seed: c.seed(),
                config_hash: r.config_hash.clone(),
                n: c.gen.n,
                m: c.gen.m,
                k: c.gen.k,
                s: c.gen.s,
                d: c.gen.d,
                n_train: c.sizes.train,
                n_val: c.sizes.val,
                n_test: c.sizes.test,
                t: c.t,
                precision: r.metrics.precision,
                recall: r.metrics.recall,
                f1: r.metrics.f1,
                success: r.metrics.success,
                mse: r.metrics.mse,
                tau: r.tau,
                structural_error: r.structural_error,
                noiseless_structural_error: r.noiseless_structural_error,
                ridge_applied: r.ridge_applied,
                condition: r.condition,
                epochs_run: r.epochs_run,
                best_epoch: r.best_epoch,
                best_val_loss: r.best_val_loss,
            });
        }
    }
    out
}

pub fn summary_records(rows: &[ResultRow]) -> Vec<SummaryRecord> {
    rows.iter()
        .map(|row| SummaryRecord {
            experiment: row.experiment.clone(),
            method: row.method.clone(),
            axis: axis_name(row),
            value: row.value,
            architecture: row.architecture.clone(),
            seeds: row.runs.len(),
            precision: row.mean.precision,
            recall: row.mean.recall,
            f1: row.mean.f1,
            success: row.mean.success,
            mse: row.mean.mse,
            structural_error: Some(row.structural_error),
            noiseless_structural_error: Some(row.noiseless_structural_error),
            tau: Some(row.tau),
        })
        .collect()
}

pub fn to_csv<T: Serialize>(records: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn timings_csv(rows: &[ResultRow]) -> Result<String> {
    #[derive(Serialize)]
    struct Timing<'a> {
        config_hash: &'a str,
        seed: u64,
        wall_clock_s: f64,
    }
    let timings: Vec<Timing> = rows
        .iter()
        .flat_map(|row| row.runs.iter())
        .map(|r| Timing { config_hash: &r.config_hash, seed: r.config.seed(), wall_clock_s: r.wall_clock_s })
        .collect();
    to_csv(&timings)
}

/// Measures drawn by [`plot_summary`], as `(column, label)`.
pub const PLOTTED: [(&str, &str); 6] = [
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("f1", "F1"),
    ("success", "Success rate"),
    ("mse", "MSE"),
    ("structural_error", "Structural error (%)"),
];

fn measure(r: &SummaryRecord, column: &str) -> Option<f64> {
    match column {
        "precision" => Some(r.precision),
        "recall" => Some(r.recall),
        "f1" => Some(r.f1),
        "success" => Some(r.success),
        "mse" => Some(r.mse),
        "structural_error" => r.structural_error,
        _ => None,
    }
}

/// Series per method for one measure, points sorted by the sweep value.
pub fn series_for(records: &[SummaryRecord], column: &str) -> Vec<Series> {
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let (Some(x), Some(y)) = (r.value, measure(r, column)) {
            by_method.entry(&r.method).or_default().push((x, y));
        }
    }
    by_method
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name: name.to_string(), points }
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

/// Writes one SVG per measure into `dir`; returns the written paths.
pub fn plot_summary(records: &[SummaryRecord], experiment: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let axis = records.first().map_or("value", |r| r.axis.as_str());
    let x_label = match axis {
        "m" => "Number of measurements M",
        "s_over_n" => "Noise sparsity S/N",
        "level" => "Complexity level",
        other => other,
    };
    let mut written = Vec::new();
    for (column, label) in PLOTTED {
        let series = series_for(records, column);
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{experiment}_{column}.svg"));
        write_file(&path, line_plot(&format!("{label} vs {x_label}"), x_label, label, &series))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes results, summary, timings, plots and the manifest for one experiment.
pub fn emit_outputs(rows: &[ResultRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let first = rows.first().ok_or_else(|| HarnessError::Config("no result rows to emit".into()))?;
    let experiment = first.experiment.clone();
    create_dir(dir)?;
    let mut written = Vec::new();

    let results = dir.join(format!("{experiment}_results.csv"));
    write_file(&results, to_csv(&run_records(rows))?)?;
    written.push(results);
    let summary = summary_records(rows);
    let summary_path = dir.join(format!("{experiment}_summary.csv"));
    write_file(&summary_path, to_csv(&summary)?)?;
    written.push(summary_path);
    let timings = dir.join(format!("{experiment}_timings.csv"));
    write_file(&timings, timings_csv(rows)?)?;
    written.push(timings);
    if first.axis.is_some() {
        written.extend(plot_summary(&summary, &experiment, dir)?);
    }

    let runs: Vec<ManifestEntry> = rows
        .iter()
        .flat_map(|row| row.runs.iter())
        .map(|r| ManifestEntry { config_hash: r.config_hash.clone(), seed: r.config.seed(), config: r.config.clone() })
        .collect();
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let manifest_path = dir.join(format!("{experiment}_manifest.json"));
    let manifest = Manifest {
        experiment: experiment.clone(),
        axis: axis_name(first),
        seeds,
        runs,
        files: written.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect(),
    };
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    written.push(manifest_path);
    Ok(written)
}
