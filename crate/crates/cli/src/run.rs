//! Run orchestration: one `(config, seed)` cell end to end, and the sweeps
//! and complexity study built from such cells.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use ndarray::Array2;
use qgt_core::checkpoint::Checkpoint;
use qgt_core::generate::{make_dataset, Dataset, Measurement};
use qgt_core::io::matrix_csv;
use qgt_core::metrics::{evaluate_rows, SampleMetrics};
use qgt_core::nn::Mlp;
use qgt_core::train::{calibrate_threshold, predict_all, threshold_outputs, train, TrainHistory};
use qgt_core::verify::{verify_model, Verification};
use qgt_core::QgtError;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunConfig, SweepAxis};
use crate::error::{HarnessError, Result};

/// Name written to the `method` column for rows produced here.
pub const METHOD: &str = "mlp";

/// Everything measured in one `(config, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub config_hash: String,
    pub metrics: SampleMetrics,
    pub test_count: usize,
    pub tau: f64,
    /// Mismatch percentage of the pooling estimate from noisy test inputs.
    pub structural_error: f64,
    /// Same estimate from the noiseless measurements `A x` of the same inputs.
    pub noiseless_structural_error: f64,
    pub ridge_applied: bool,
    /// Gram matrix eigenvalue ratio; `None` when singular.
    pub condition: Option<f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_clock_s: f64,
}

impl RunOutcome {
    /// Equality on every field except wall-clock time.
    pub fn same_result(&self, other: &RunOutcome) -> bool {
        let mut a = self.clone();
        a.wall_clock_s = other.wall_clock_s;
        &a == other
    }
}

/// Seed-averaged results at one point of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub axis: Option<SweepAxis>,
    pub value: Option<f64>,
    pub architecture: String,
    pub runs: Vec<RunOutcome>,
    pub mean: SampleMetrics,
    pub structural_error: f64,
    pub noiseless_structural_error: f64,
    pub tau: f64,
    pub wall_clock_s: f64,
}

impl ResultRow {
    fn from_runs(experiment: &str, axis: Option<SweepAxis>, runs: Vec<RunOutcome>) -> Result<Self> {
        let first = runs.first().ok_or_else(|| HarnessError::Config("no runs at a sweep point".into()))?;
        let k = runs.len() as f64;
        let avg = |f: &dyn Fn(&RunOutcome) -> f64| runs.iter().map(f).sum::<f64>() / k;
        let mean = SampleMetrics {
            precision: avg(&|r| r.metrics.precision),
            recall: avg(&|r| r.metrics.recall),
            f1: avg(&|r| r.metrics.f1),
            success: avg(&|r| r.metrics.success),
            mse: avg(&|r| r.metrics.mse),
        };
        Ok(Self {
            experiment: experiment.to_string(),
            method: METHOD.to_string(),
            axis,
            value: first.config.sweep_value,
            architecture: first.config.architecture.label(),
            mean,
            structural_error: avg(&|r| r.structural_error),
            noiseless_structural_error: avg(&|r| r.noiseless_structural_error),
            tau: avg(&|r| r.tau),
            wall_clock_s: runs.iter().map(|r| r.wall_clock_s).sum(),
            runs,
        })
    }
}

/// Artifacts of a finished run, before anything is written.
pub struct RunArtifacts {
    pub model: Mlp,
    pub history: TrainHistory,
    pub test: Dataset,
    pub verification: Verification,
}

fn measurements(rows: &Array2<i32>, t: usize) -> Vec<Measurement> {
    rows.rows().into_iter().take(t).map(|r| Measurement { values: r.to_owned() }).collect()
}

/// Runs one cell and returns its outcome together with the in-memory artifacts.
pub fn execute(run: &RunConfig) -> Result<(RunOutcome, RunArtifacts)> {
    run.validate()?;
    let label = format!("{}[{}]", run.experiment, run.hash());
    let ctx = |source: QgtError| HarnessError::Run { run: label.clone(), source };
    let started = Instant::now();

    let (train_set, val_set, test_set) = make_dataset(&run.gen, run.sizes).map_err(ctx)?;
    let hidden = run.architecture.hidden()?;
    let mut model = Mlp::build(run.gen.m, run.gen.n, &hidden, run.train.seed).map_err(ctx)?;
    model.complexity_level = run.architecture.level();
    let (model, history) = train(model, &train_set, &val_set, &run.train).map_err(ctx)?;

    let tau = calibrate_threshold(&model, &val_set).map_err(ctx)?;
    let outputs = predict_all(&model, &test_set.inputs_f64()).map_err(ctx)?;
    let decoded = threshold_outputs(outputs.view(), tau);
    let report = evaluate_rows(test_set.signals.view(), decoded.view()).map_err(ctx)?;

    let noisy = measurements(&test_set.measurements, run.t);
    let verification = verify_model(&model, &noisy, run.t, &test_set.pooling).map_err(ctx)?;
    let clean = measurements(&test_set.noiseless_measurements(), run.t);
    let noiseless = verify_model(&model, &clean, run.t, &test_set.pooling).map_err(ctx)?;

    let outcome = RunOutcome {
        config: run.clone(),
        config_hash: run.hash(),
        metrics: report.mean,
        test_count: report.count,
        tau: tau.tau,
        structural_error: verification.summary.mismatch_percent,
        noiseless_structural_error: noiseless.summary.mismatch_percent,
        ridge_applied: verification.summary.ridge_applied,
        condition: Some(verification.summary.condition).filter(|c| c.is_finite()),
        epochs_run: history.epochs_run(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    info!(
        "{label}: F1={:.4} SR={:.4} error={:.2}% tau={:.4} epochs={}",
        outcome.metrics.f1, outcome.metrics.success, outcome.structural_error, outcome.tau, outcome.epochs_run
    );
    Ok((outcome, RunArtifacts { model, history, test: test_set, verification }))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Directory holding one run's artifacts below an output root.
pub fn run_dir(root: &Path, run: &RunConfig) -> PathBuf {
    root.join("runs").join(format!("{}-seed{}-{}", run.experiment, run.seed(), run.hash()))
}

/// Writes checkpoint, history, true and recovered pooling matrices and the outcome.
pub fn persist(dir: &Path, outcome: &RunOutcome, art: &RunArtifacts) -> Result<()> {
    create_dir(dir)?;
    let mut ck = Checkpoint::from_model(&art.model);
    ck.gen_config = Some(outcome.config.gen);
    ck.train_config = Some(outcome.config.train);
    ck.threshold = Some(qgt_core::Threshold { tau: outcome.tau });
    ck.history = Some(art.history.clone());
    write_file(&dir.join("checkpoint.json"), ck.to_json()?)?;
    write_file(&dir.join("history.csv"), art.history.to_csv())?;
    write_file(&dir.join("pooling.csv"), matrix_csv(art.test.pooling.entries()))?;
    write_file(&dir.join("a_relaxed.csv"), matrix_csv(&art.verification.relaxed.values))?;
    write_file(&dir.join("a_hat.csv"), matrix_csv(&art.verification.recovered.values))?;
    write_file(&dir.join("outcome.json"), serde_json::to_string_pretty(outcome)?)?;
    Ok(())
}

/// Runs one cell, persisting its artifacts below `root` when given.
pub fn run_cell(run: &RunConfig, root: Option<&Path>) -> Result<RunOutcome> {
    let (outcome, art) = execute(run)?;
    if let Some(root) = root {
        persist(&run_dir(root, run), &outcome, &art)?;
    }
    Ok(outcome)
}

/// Runs every cell on up to `workers` threads; results keep the input order.
pub fn run_cells(runs: &[RunConfig], root: Option<&Path>, workers: usize) -> Result<Vec<RunOutcome>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, runs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                let result = run_cell(run, root);
                let failed = result.is_err();
                slots.lock().expect("result slots")[i] = Some(result);
                if failed {
                    next.store(runs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(runs.len());
    for slot in slots.into_inner().expect("result slots") {
        match slot {
            Some(result) => out.push(result?),
            None => break,
        }
    }
    Ok(out)
}

/// Runs an experiment and groups its cells into one seed-averaged row per sweep value.
pub fn run_experiment(cfg: &ExperimentConfig, root: Option<&Path>, workers: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let runs = cfg.runs()?;
    let outcomes = run_cells(&runs, root, workers)?;
    let axis = cfg.sweep.as_ref().map(|s| s.axis);
    outcomes
        .chunks(cfg.seeds.len())
        .map(|chunk| ResultRow::from_runs(&cfg.name, axis, chunk.to_vec()))
        .collect()
}

/// Seed-averaged row for a config without a sweep.
pub fn run_single(cfg: &ExperimentConfig, root: Option<&Path>) -> Result<ResultRow> {
    let mut cfg = cfg.clone();
    cfg.sweep = None;
    let mut rows = run_experiment(&cfg, root, 1)?;
    Ok(rows.remove(0))
}

fn sorted_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<ExperimentConfig> {
    let mut cfg = cfg.clone();
    let sweep = cfg
        .sweep
        .as_mut()
        .filter(|s| s.axis == axis)
        .ok_or_else(|| HarnessError::Config(format!("expected a `{}` sweep", axis.name())))?;
    sweep.values.sort_by(f64::total_cmp);
    sweep.values.dedup();
    Ok(cfg)
}

/// One row per `M` value, ascending.
pub fn run_sweep_measurements(cfg: &ExperimentConfig, root: Option<&Path>, workers: usize) -> Result<Vec<ResultRow>> {
    run_experiment(&sorted_sweep(cfg, SweepAxis::M)?, root, workers)
}

/// One row per `S/N` value, ascending.
pub fn run_sweep_noise(cfg: &ExperimentConfig, root: Option<&Path>, workers: usize) -> Result<Vec<ResultRow>> {
    run_experiment(&sorted_sweep(cfg, SweepAxis::SOverN)?, root, workers)
}

/// One row per complexity level, ascending.
pub fn run_complexity_study(cfg: &ExperimentConfig, root: Option<&Path>, workers: usize) -> Result<Vec<ResultRow>> {
    run_experiment(&sorted_sweep(cfg, SweepAxis::Level)?, root, workers)
}

/// Re-executes the config stored in an `outcome.json` and compares results.
pub fn replay(outcome_path: &Path) -> Result<(RunOutcome, RunOutcome)> {
    let text = fs::read_to_string(outcome_path).map_err(|e| HarnessError::io(outcome_path, e))?;
    let stored: RunOutcome = serde_json::from_str(&text)?;
    let (fresh, _) = execute(&stored.config)?;
    Ok((stored, fresh))
}
