use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use qgt_core::checkpoint::Checkpoint;
use qgt_core::generate::{gen_split, make_dataset, pooling_for, Dataset, Measurement};
use qgt_core::io::{dataset_csv, matrix_csv, read_dataset, write_dataset};
use qgt_core::metrics::evaluate_rows;
use qgt_core::nn::Mlp;
use qgt_core::train::{calibrate_threshold, predict_all, threshold_outputs, train};
use qgt_core::verify::verify_model;
use qgt_core::{QgtError, Split};
use qgt_harness::report::{plot_summary, read_summary_csv, SummaryRecord};
use qgt_harness::run::{create_dir, replay, write_file};
use qgt_harness::{
    emit_outputs, run_complexity_study, run_experiment, run_sweep_measurements, run_sweep_noise, ExperimentConfig,
    HarnessError, ResultRow, Result, RunConfig,
};

#[derive(Parser)]
#[command(name = "qgt", version, about = "Quantitative group testing with a learned, verifiable decoder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in preset of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; run r uses seed + r.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds per sweep point.
    #[arg(long, global = true)]
    seeds: Option<u64>,
    /// Quarter-size datasets and a capped epoch budget.
    #[arg(long, global = true)]
    smoke: bool,
    /// Output root.
    #[arg(long, global = true, env = "QGT_OUTPUT_DIR", default_value = "qgt-output")]
    out: PathBuf,
    /// Concurrent runs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test splits and the pooling matrix.
    Generate {
        /// Also write each split as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Train one decoder, calibrate its threshold and save a checkpoint.
    Train,
    /// Score a checkpoint on a test split.
    Eval(EvalArgs),
    /// Recover the pooling matrix from a checkpoint's Jacobians.
    Verify {
        #[command(flatten)]
        eval: EvalArgs,
        /// Number of Jacobians; defaults to the config's T.
        #[arg(long)]
        t: Option<usize>,
    },
    /// Seed-averaged single-point experiment.
    Run,
    /// Sweep the number of measurements.
    SweepM,
    /// Sweep the noise sparsity ratio.
    SweepS,
    /// Compare decoder complexity levels.
    Complexity,
    /// Redraw plots from one or more summary CSVs (rows from other methods are extra series).
    Plot {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        name: String,
    },
    /// Re-execute a stored run and compare against its recorded outcome.
    Replay { outcome: PathBuf },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; the test split is regenerated from the checkpoint's config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples to regenerate when no dataset file is given.
    #[arg(long)]
    count: Option<usize>,
}

impl Common {
    fn experiment(&self, preset: fn() -> ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
            }
            None => preset(),
        };
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(base) = self.seed {
            cfg = cfg.with_base_seed(base);
        }
        if self.smoke {
            cfg = cfg.smoke();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn first_run(&self) -> Result<RunConfig> {
        let cfg = self.experiment(ExperimentConfig::paper_single)?;
        Ok(cfg.runs()?.remove(0))
    }
}

fn core<T>(r: std::result::Result<T, QgtError>) -> Result<T> {
    r.map_err(HarnessError::Core)
}

fn generate(common: &Common, csv: bool) -> Result<()> {
    let run = common.first_run()?;
    let (train_set, val_set, test_set) = core(make_dataset(&run.gen, run.sizes))?;
    let dir = common.out.join(format!("data-seed{}-{}", run.seed(), run.hash()));
    create_dir(&dir)?;
    for ds in [&train_set, &val_set, &test_set] {
        let path = dir.join(format!("{}.qgt", ds.split.name()));
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        core(write_dataset(ds, BufWriter::new(file)))?;
        if csv {
            write_file(&dir.join(format!("{}.csv", ds.split.name())), dataset_csv(ds))?;
        }
    }
    write_file(&dir.join("pooling.csv"), matrix_csv(train_set.pooling.entries()))?;
    println!("{}", dir.display());
    Ok(())
}

fn train_cmd(common: &Common) -> Result<()> {
    let run = common.first_run()?;
    let (train_set, val_set, _) = core(make_dataset(&run.gen, run.sizes))?;
    let mut model = core(Mlp::build(run.gen.m, run.gen.n, &run.architecture.hidden()?, run.train.seed))?;
    model.complexity_level = run.architecture.level();
    let (model, history) = core(train(model, &train_set, &val_set, &run.train))?;
    let tau = core(calibrate_threshold(&model, &val_set))?;
    let dir = common.out.join(format!("model-seed{}-{}", run.seed(), run.hash()));
    create_dir(&dir)?;
    let mut ck = Checkpoint::from_model(&model);
    ck.gen_config = Some(run.gen);
    ck.train_config = Some(run.train);
    ck.threshold = Some(tau);
    ck.history = Some(history.clone());
    write_file(&dir.join("checkpoint.json"), core(ck.to_json())?)?;
    write_file(&dir.join("history.csv"), history.to_csv())?;
    println!("{}", dir.join("checkpoint.json").display());
    Ok(())
}

fn load(common: &Common, args: &EvalArgs) -> Result<(Checkpoint, Mlp, Dataset)> {
    let text = std::fs::read_to_string(&args.checkpoint).map_err(|e| HarnessError::io(&args.checkpoint, e))?;
    let ck = core(Checkpoint::from_json(&text))?;
    let model = core(ck.to_model())?;
    let data = match &args.data {
        Some(path) => {
            let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
            core(read_dataset(BufReader::new(file), Split::Test))?
        }
        None => {
            let gen = ck
                .gen_config
                .ok_or_else(|| HarnessError::Config("checkpoint has no data config; pass --data".into()))?;
            let count = match args.count {
                Some(c) => c,
                None => common.first_run()?.sizes.test,
            };
            core(gen_split(&gen, Arc::new(core(pooling_for(&gen))?), Split::Test, count))?
        }
    };
    Ok((ck, model, data))
}

fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    let (ck, model, test) = load(common, args)?;
    let tau = ck.threshold.ok_or_else(|| HarnessError::Config("checkpoint has no calibrated threshold".into()))?;
    let outputs = core(predict_all(&model, &test.inputs_f64()))?;
    let report = core(evaluate_rows(test.signals.view(), threshold_outputs(outputs.view(), tau).view()))?;
    println!("{}", serde_json::to_string_pretty(&report.mean)?);
    Ok(())
}

fn verify(common: &Common, args: &EvalArgs, t: Option<usize>) -> Result<()> {
    let (_, model, test) = load(common, args)?;
    let t = match t {
        Some(t) => t,
        None => common.first_run()?.t,
    };
    let inputs: Vec<Measurement> = (0..test.len().min(t)).map(|i| test.measurement(i)).collect();
    let v = core(verify_model(&model, &inputs, t, &test.pooling))?;
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    write_file(&dir.join("a_relaxed.csv"), matrix_csv(&v.relaxed.values))?;
    write_file(&dir.join("a_hat.csv"), matrix_csv(&v.recovered.values))?;
    println!("{}", serde_json::to_string_pretty(&v.summary)?);
    Ok(())
}

type Runner = fn(&ExperimentConfig, Option<&Path>, usize) -> Result<Vec<ResultRow>>;

fn experiment(common: &Common, preset: fn() -> ExperimentConfig, runner: Runner) -> Result<()> {
    let cfg = common.experiment(preset)?;
    let rows = runner(&cfg, Some(&common.out), common.workers)?;
    for path in emit_outputs(&rows, &common.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn plot(common: &Common, summaries: &[PathBuf], name: &str) -> Result<()> {
    let mut records: Vec<SummaryRecord> = Vec::new();
    for path in summaries {
        records.extend(read_summary_csv(path)?);
    }
    create_dir(&common.out)?;
    for path in plot_summary(&records, name, &common.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn replay_cmd(outcome: &Path) -> Result<()> {
    let (stored, fresh) = replay(outcome)?;
    if !stored.same_result(&fresh) {
        return Err(HarnessError::Config(format!(
            "replay of {} diverged from the stored outcome",
            outcome.display()
        )));
    }
    println!("replay matches {}", stored.config_hash);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Generate { csv } => generate(c, *csv),
        Command::Train => train_cmd(c),
        Command::Eval(args) => eval(c, args),
        Command::Verify { eval, t } => verify(c, eval, *t),
        Command::Run => experiment(c, ExperimentConfig::paper_single, run_experiment),
        Command::SweepM => experiment(c, ExperimentConfig::paper_sweep_m, run_sweep_measurements),
        Command::SweepS => experiment(c, ExperimentConfig::paper_sweep_s, run_sweep_noise),
        Command::Complexity => experiment(c, ExperimentConfig::paper_complexity, run_complexity_study),
        Command::Plot { summaries, name } => plot(c, summaries, name),
        Command::Replay { outcome } => replay_cmd(outcome),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
