//! Generative model for quantitative group testing: Bernoulli pooling designs,
//! sparse-in-expectation binary signals, sparse bounded integer noise and the
//! forward map `y = A x + η`.
//!
//! Every random draw comes from a ChaCha8 stream selected by
//! `(seed, domain, index)`, so a sample's content depends only on the
//! generation config and its position in its split. Changing the size of one
//! split never perturbs another, and generation order does not matter.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Stream domains. A domain occupies the top byte of the ChaCha stream id and
/// the per-domain index the remaining 56 bits.
pub mod stream {
    pub const POOLING: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const VAL: u64 = 2;
    pub const TEST: u64 = 3;
    pub const WEIGHT_INIT: u64 = 4;
    pub const TRAINING: u64 = 5;
    pub const MISC: u64 = 6;
}

/// Deterministic generator for the stream `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(domain < 256 && index < (1 << 56));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) | index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn stream_domain(self) -> u64 {
        match self {
            Split::Train => stream::TRAIN,
            Split::Val => stream::VAL,
            Split::Test => stream::TEST,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The `(N, M, K, S, D, seed)` tuple that fully determines a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Number of items.
    pub n: usize,
    /// Number of pooled tests.
    pub m: usize,
    /// Expected number of defectives.
    pub k: f64,
    /// Noise sparsity parameter; an entry is perturbed with probability `s / n`.
    pub s: f64,
    /// Noise magnitude bound.
    pub d: i32,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return invalid(format!("dimensions must be positive (N={}, M={})", self.n, self.m));
        }
        check_rate("K", self.k, self.n)?;
        check_rate("S", self.s, self.n)?;
        if self.d < 0 {
            return invalid(format!("noise bound D must be non-negative, got {}", self.d));
        }
        Ok(())
    }
}

fn check_rate(name: &str, value: f64, n: usize) -> Result<()> {
    if !(0.0..=n as f64).contains(&value) {
        return invalid(format!("{name} must lie in [0, N={n}], got {value}"));
    }
    Ok(())
}

/// Binary `M x N` design; entry `(i, j)` is 1 when item `j` takes part in pool `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingMatrix {
    entries: Array2<u8>,
}

impl PoolingMatrix {
    pub fn from_entries(entries: Array2<u8>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return invalid("pooling matrix must have at least one row and one column");
        }
        if entries.iter().any(|&v| v > 1) {
            return invalid("pooling matrix entries must be 0 or 1");
        }
        Ok(Self { entries })
    }

    /// Number of pooled tests `M`.
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of items `N`.
    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<u8> {
        &self.entries
    }

    pub fn row_popcount(&self, i: usize) -> u32 {
        self.entries.row(i).iter().map(|&v| u32::from(v)).sum()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.entries.mapv(f64::from)
    }
}

/// Draws an `M x N` design with independent fair-coin entries.
pub fn gen_pooling_matrix<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<PoolingMatrix> {
    if m == 0 || n == 0 {
        return invalid(format!("pooling matrix dimensions must be positive, got {m}x{n}"));
    }
    let entries = Array2::from_shape_simple_fn((m, n), || u8::from(rng.random_bool(0.5)));
    Ok(PoolingMatrix { entries })
}

/// Defect indicator vector drawn with `Pr(x_j = 1) = K / N`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySignal {
    pub values: Array1<u8>,
    pub expected_sparsity: f64,
}

impl BinarySignal {
    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

pub fn gen_signal<R: Rng + ?Sized>(n: usize, k: f64, rng: &mut R) -> Result<BinarySignal> {
    if n == 0 {
        return invalid("signal length must be positive");
    }
    check_rate("K", k, n)?;
    let p = k / n as f64;
    let values = Array1::from_shape_simple_fn(n, || u8::from(rng.random_bool(p)));
    Ok(BinarySignal { values, expected_sparsity: k })
}

/// Sparse integer perturbation. Each entry is, with probability `S / N`,
/// uniform on `{-D, ..., D}` (zero included), and zero otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    pub values: Array1<i32>,
    pub sparsity_param: f64,
    pub magnitude_bound: i32,
}

pub fn gen_noise<R: Rng + ?Sized>(m: usize, s: f64, n: usize, d: i32, rng: &mut R) -> Result<NoiseVector> {
    if n == 0 {
        return invalid("item count N must be positive");
    }
    check_rate("S", s, n)?;
    if d < 0 {
        return invalid(format!("noise bound D must be non-negative, got {d}"));
    }
    let p = s / n as f64;
    let values = Array1::from_shape_simple_fn(m, || {
        if rng.random_bool(p) {
            rng.random_range(-d..=d)
        } else {
            0
        }
    });
    Ok(NoiseVector { values, sparsity_param: s, magnitude_bound: d })
}

/// Pooled counts `y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Measurement {
    pub values: Array1<i32>,
}

impl Measurement {
    pub fn to_f64(&self) -> Array1<f64> {
        self.values.mapv(f64::from)
    }
}

/// Exact integer forward map `y_i = sum_j A_ij x_j + η_i`.
pub fn measure(a: &PoolingMatrix, x: &BinarySignal, noise: &NoiseVector) -> Result<Measurement> {
    let values = measure_raw(a, x.values.view(), noise.values.view())?;
    Ok(Measurement { values })
}

fn measure_raw(a: &PoolingMatrix, x: ArrayView1<u8>, noise: ArrayView1<i32>) -> Result<Array1<i32>> {
    if x.len() != a.cols() || noise.len() != a.rows() {
        return invalid(format!(
            "dimension mismatch: A is {}x{}, x has length {}, noise has length {}",
            a.rows(),
            a.cols(),
            x.len(),
            noise.len()
        ));
    }
    let values = a
        .entries
        .rows()
        .into_iter()
        .zip(noise.iter())
        .map(|(row, &eta)| {
            let count: i32 = row.iter().zip(x.iter()).map(|(&aij, &xj)| i32::from(aij & xj)).sum();
            count + eta
        })
        .collect();
    Ok(values)
}

/// Requested split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Sizes used for the MLP in all reported experiments.
    pub const PAPER: SplitSizes = SplitSizes { train: 119_205, val: 14_900, test: 14_900 };

    pub fn scaled_down(self, factor: usize) -> SplitSizes {
        SplitSizes { train: self.train / factor, val: self.val / factor, test: self.test / factor }
    }
}

/// One split of samples generated under a shared pooling design.
///
/// Samples are stored column-wise: row `i` of `measurements` and `signals`
/// together form the `i`-th `(y, x)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pooling: Arc<PoolingMatrix>,
    pub measurements: Array2<i32>,
    pub signals: Array2<u8>,
    pub split: Split,
    pub gen_config: GenConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.signals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn measurement(&self, i: usize) -> Measurement {
        Measurement { values: self.measurements.row(i).to_owned() }
    }

    pub fn signal(&self, i: usize) -> ArrayView1<'_, u8> {
        self.signals.row(i)
    }

    /// Measurements as a `count x M` float matrix, the network's input layout.
    pub fn inputs_f64(&self) -> Array2<f64> {
        self.measurements.mapv(f64::from)
    }

    pub fn targets_f64(&self) -> Array2<f64> {
        self.signals.mapv(f64::from)
    }

    /// Noise-free measurements `A x` for every sample in the split.
    pub fn noiseless_measurements(&self) -> Array2<i32> {
        let a = self.pooling.entries.mapv(i32::from);
        self.signals.mapv(i32::from).dot(&a.t())
    }
}

/// Draws the shared pooling matrix for `config`.
pub fn pooling_for(config: &GenConfig) -> Result<PoolingMatrix> {
    config.validate()?;
    gen_pooling_matrix(config.m, config.n, &mut stream_rng(config.seed, stream::POOLING, 0))
}

/// Generates `count` samples of `split`. Sample `i` reads only from stream
/// `(seed, split, i)`.
pub fn gen_split(config: &GenConfig, pooling: Arc<PoolingMatrix>, split: Split, count: usize) -> Result<Dataset> {
    config.validate()?;
    if pooling.rows() != config.m || pooling.cols() != config.n {
        return invalid("pooling matrix does not match config dimensions");
    }
    let mut measurements = Array2::<i32>::zeros((count, config.m));
    let mut signals = Array2::<u8>::zeros((count, config.n));
    for i in 0..count {
        let mut rng = stream_rng(config.seed, split.stream_domain(), i as u64);
        let x = gen_signal(config.n, config.k, &mut rng)?;
        let eta = gen_noise(config.m, config.s, config.n, config.d, &mut rng)?;
        let y = measure(&pooling, &x, &eta)?;
        measurements.row_mut(i).assign(&y.values);
        signals.row_mut(i).assign(&x.values);
    }
    Ok(Dataset { pooling, measurements, signals, split, gen_config: *config })
}

/// Generates train/val/test splits sharing one pooling matrix.
pub fn make_dataset(config: &GenConfig, sizes: SplitSizes) -> Result<(Dataset, Dataset, Dataset)> {
    let pooling = Arc::new(pooling_for(config)?);
    Ok((
        gen_split(config, Arc::clone(&pooling), Split::Train, sizes.train)?,
        gen_split(config, Arc::clone(&pooling), Split::Val, sizes.val)?,
        gen_split(config, pooling, Split::Test, sizes.test)?,
    ))
}
