//! Experiment configuration: what to generate, which decoder to train, which
//! axis to sweep and over which seeds.

use qgt_core::generate::{GenConfig, SplitSizes};
use qgt_core::nn::hidden_for_level;
use qgt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Size divisor applied by the smoke profile.
pub const SMOKE_SIZE_DIVISOR: usize = 4;
/// Epoch cap applied by the smoke profile.
pub const SMOKE_MAX_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Complexity level 1..=7.
    Level(u8),
    /// Explicit hidden widths.
    Hidden(Vec<usize>),
}

impl Architecture {
    pub fn hidden(&self) -> Result<Vec<usize>> {
        match self {
            Architecture::Level(l) => Ok(hidden_for_level(*l)?),
            Architecture::Hidden(h) => Ok(h.clone()),
        }
    }

    pub fn level(&self) -> Option<u8> {
        match self {
            Architecture::Level(l) => Some(*l),
            Architecture::Hidden(_) => None,
        }
    }

    /// `500-500` style label; `linear` for no hidden layers.
    pub fn label(&self) -> String {
        match self.hidden() {
            Ok(h) if h.is_empty() => "linear".into(),
            Ok(h) => h.iter().map(ToString::to_string).collect::<Vec<_>>().join("-"),
            Err(_) => "invalid".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of measurements `M`.
    M,
    /// Noise sparsity ratio `S / N`.
    SOverN,
    /// Complexity level.
    Level,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::M => "m",
            SweepAxis::SOverN => "s_over_n",
            SweepAxis::Level => "level",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// A full experiment: base parameters, an optional sweep and a seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub k: f64,
    /// Absolute noise sparsity `S`; entries are perturbed with probability `S / N`.
    pub s: f64,
    pub d: i32,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub sizes: SplitSizes,
    pub architecture: Architecture,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Number of test inputs whose Jacobians enter the pooling estimate.
    pub t: usize,
}

/// One `(config, seed)` cell of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub gen: GenConfig,
    pub sizes: SplitSizes,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub t: usize,
    /// Value of the swept parameter, if any.
    #[serde(default)]
    pub sweep_value: Option<f64>,
}

impl RunConfig {
    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.gen.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.architecture.hidden()?;
        if self.sizes.train == 0 {
            return Err(HarnessError::Config("n_train must be positive".into()));
        }
        if self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(HarnessError::Config("validation and test splits must be non-empty".into()));
        }
        if self.t == 0 || self.t > self.sizes.test {
            return Err(HarnessError::Config(format!(
                "T={} must lie in 1..=n_test ({})",
                self.t, self.sizes.test
            )));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    fn base(name: &str, m: usize, s_over_n: f64, sweep: Option<Sweep>) -> Self {
        let n = 100;
        Self {
            name: name.to_string(),
            n,
            m,
            k: 0.06 * n as f64,
            s: s_over_n * n as f64,
            d: 1,
            sweep,
            sizes: SplitSizes::PAPER,
            architecture: Architecture::Level(5),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            t: 1000,
        }
    }

    /// Level-5 decoder at `N=100, M=35, K=6, D=1, S/N=0.06`.
    pub fn paper_single() -> Self {
        Self::base("single", 35, 0.06, None)
    }

    /// Levels 1..=7 at the single-run setting.
    pub fn paper_complexity() -> Self {
        let sweep = Sweep { axis: SweepAxis::Level, values: (1..=7).map(f64::from).collect() };
        Self::base("complexity", 35, 0.06, Some(sweep))
    }

    /// `M` from 20 to 40 at `S/N = 0.1`.
    pub fn paper_sweep_m() -> Self {
        let sweep = Sweep { axis: SweepAxis::M, values: vec![20.0, 25.0, 30.0, 35.0, 40.0] };
        Self::base("sweep_m", 35, 0.1, Some(sweep))
    }

    /// `S/N` from 0.04 to 0.20 at `M = 35`.
    pub fn paper_sweep_s() -> Self {
        let sweep = Sweep { axis: SweepAxis::SOverN, values: vec![0.04, 0.08, 0.12, 0.16, 0.20] };
        Self::base("sweep_s", 35, 0.1, Some(sweep))
    }

    /// Quarter-size splits and at most [`SMOKE_MAX_EPOCHS`] epochs.
    pub fn smoke(mut self) -> Self {
        self.sizes = self.sizes.scaled_down(SMOKE_SIZE_DIVISOR);
        self.train.max_epochs = self.train.max_epochs.min(SMOKE_MAX_EPOCHS);
        self.t = self.t.min(self.sizes.test);
        self
    }

    /// Replaces the seed list with `base, base + 1, ...` of the same length.
    pub fn with_base_seed(mut self, base: u64) -> Self {
        let count = self.seeds.len() as u64;
        self.seeds = (base..base + count).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::Config("sweep values are empty".into()));
            }
        }
        for run in self.runs()? {
            run.validate()?;
        }
        Ok(())
    }

    /// Expands the experiment into runs, ordered by sweep value then seed.
    pub fn runs(&self) -> Result<Vec<RunConfig>> {
        let values: Vec<Option<f64>> = match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        };
        let mut runs = Vec::new();
        for value in values {
            for &seed in &self.seeds {
                runs.push(self.run_for(value, seed)?);
            }
        }
        Ok(runs)
    }

    fn run_for(&self, value: Option<f64>, seed: u64) -> Result<RunConfig> {
        let mut gen = GenConfig { n: self.n, m: self.m, k: self.k, s: self.s, d: self.d, seed };
        let mut architecture = self.architecture.clone();
        if let (Some(sweep), Some(v)) = (&self.sweep, value) {
            match sweep.axis {
                SweepAxis::M => gen.m = integral(v, "M")?,
                SweepAxis::SOverN => gen.s = v * self.n as f64,
                SweepAxis::Level => architecture = Architecture::Level(integral(v, "level")?),
            }
        }
        Ok(RunConfig {
            experiment: self.name.clone(),
            gen,
            sizes: self.sizes,
            architecture,
            train: TrainConfig { seed, ..self.train },
            t: self.t,
            sweep_value: value,
        })
    }
}

fn integral<T: TryFrom<u64>>(v: f64, what: &str) -> Result<T> {
    if v.fract() != 0.0 || v < 0.0 {
        return Err(HarnessError::Config(format!("{what} sweep value {v} is not a non-negative integer")));
    }
    T::try_from(v as u64).map_err(|_| HarnessError::Config(format!("{what} sweep value {v} out of range")))
}
