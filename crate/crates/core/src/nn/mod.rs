//! Dense feed-forward decoder `f: Z^M -> R^N`.
//!
//! The layer menu is fixed: dense, leaky ReLU, batch normalization and
//! inverted dropout. A hidden block is `dense -> leaky_relu -> batchnorm ->
//! dropout`; the output layer is a bare dense map. In eval mode the network
//! is piecewise linear in its input, which is what makes its Jacobian a
//! meaningful local inverse of the pooling map.

mod adam;
mod layer;

pub use adam::{AdamConfig, AdamState};
pub use layer::{BatchNorm, Dense, Layer, BN_EPS, BN_MOMENTUM, DROPOUT_P, LEAKY_SLOPE};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QgtError, Result};
use crate::generate::{stream, stream_rng};
use layer::{leaky, leaky_grad, LayerCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Hidden layer widths for complexity levels 1 through 7.
pub fn hidden_for_level(level: u8) -> Result<Vec<usize>> {
    let hidden = match level {
        1 => vec![],
        2 => vec![128],
        3 => vec![256],
        4 => vec![256, 256],
        5 => vec![500, 500],
        6 => vec![256, 512, 256],
        7 => vec![128, 256, 512, 256, 128],
        _ => return invalid(format!("complexity level must be in 1..=7, got {level}")),
    };
    Ok(hidden)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
    mode: Mode,
    pub complexity_level: Option<u8>,
    /// Bumped whenever parameters change; caches from older versions are stale.
    version: u64,
}

/// Intermediate values from one forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mode: Mode,
    version: u64,
    batch: usize,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// One flat gradient per trainable tensor, in the model's canonical order:
/// for each dense layer `weight` (row-major) then `bias`, for each batchnorm
/// `gamma` then `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Array1<f64>>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

impl Mlp {
    /// Builds the decoder for `input_dim -> hidden... -> output_dim`.
    ///
    /// Dense weights are uniform in `±sqrt(6 / (fan_in + fan_out))`, biases
    /// start at zero, batchnorm at identity. The model starts in train mode.
    pub fn build(input_dim: usize, output_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return invalid("all layer widths must be positive");
        }
        let mut rng = stream_rng(seed, stream::WEIGHT_INIT, 0);
        let mut layers = Vec::with_capacity(4 * hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden {
            layers.push(Layer::Dense(init_dense(fan_in, width, &mut rng)));
            layers.push(Layer::LeakyRelu { dim: width, slope: LEAKY_SLOPE });
            layers.push(Layer::BatchNorm(BatchNorm::new(width)));
            layers.push(Layer::Dropout { dim: width, p: DROPOUT_P });
            fan_in = width;
        }
        layers.push(Layer::Dense(init_dense(fan_in, output_dim, &mut rng)));
        Ok(Self { layers, input_dim, output_dim, mode: Mode::Train, complexity_level: None, version: 0 })
    }

    pub fn build_level(input_dim: usize, output_dim: usize, level: u8, seed: u64) -> Result<Self> {
        let mut model = Self::build(input_dim, output_dim, &hidden_for_level(level)?, seed)?;
        model.complexity_level = Some(level);
        Ok(model)
    }

    /// Assembles a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>, complexity_level: Option<u8>) -> Result<Self> {
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return invalid("a model needs at least one layer"),
        };
        if !matches!(last, Layer::Dense(_)) {
            return invalid("the output layer must be dense");
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return invalid(format!(
                    "layer dimensions do not chain: {} outputs {} but {} expects {}",
                    pair[0].kind(),
                    pair[0].out_dim(),
                    pair[1].kind(),
                    pair[1].in_dim()
                ));
            }
        }
        for layer in &layers {
            match layer {
                Layer::Dense(d) if d.bias.len() != d.weight.nrows() => {
                    return invalid("dense bias length must equal its output width")
                }
                Layer::BatchNorm(bn)
                    if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()]
                        .iter()
                        .any(|&l| l != bn.gamma.len()) =>
                {
                    return invalid("batchnorm statistics must share one length")
                }
                Layer::Dropout { p, .. } if !(0.0..1.0).contains(p) => {
                    return invalid(format!("dropout probability must lie in [0, 1), got {p}"))
                }
                _ => {}
            }
        }
        let input_dim = first.in_dim();
        let output_dim = last.out_dim();
        Ok(Self { layers, input_dim, output_dim, mode: Mode::Eval, complexity_level, version: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Widths of the hidden dense layers.
    pub fn hidden(&self) -> Vec<usize> {
        let dense: Vec<usize> =
            self.layers.iter().filter(|l| matches!(l, Layer::Dense(_))).map(Layer::out_dim).collect();
        dense[..dense.len() - 1].to_vec()
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Trainable tensors in canonical order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice().expect("standard layout"));
                    out.push(d.bias.as_slice().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("standard layout"));
                    out.push(bn.beta.as_slice().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable trainable tensors in canonical order. Invalidates existing caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weight.as_slice_mut().expect("standard layout"));
                    out.push(d.bias.as_slice_mut().expect("standard layout"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim {
            return invalid(format!("batch width {} does not match input dim {}", batch.ncols(), self.input_dim));
        }
        if batch.nrows() == 0 {
            return invalid("empty batch");
        }
        Ok(())
    }

    /// Forward pass in the model's current mode.
    ///
    /// Train mode normalizes with batch statistics, updates running
    /// statistics and samples dropout masks from `rng`; it needs at least two
    /// rows. Eval mode ignores `rng`.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &Array2<f64>, rng: &mut R) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(batch)?;
        if self.mode == Mode::Train && batch.nrows() < 2 {
            return invalid("train-mode forward needs a batch of at least 2 rows");
        }
        let mode = self.mode;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = batch.clone();
        for layer in &mut self.layers {
            let (next, cache) = layer.forward(h, mode, rng);
            caches.push(cache);
            h = next;
        }
        if mode == Mode::Train {
            // Running statistics moved; eval caches taken before this are stale.
            self.version += 1;
        }
        let cache = ForwardCache { layers: caches, mode, version: self.version, batch: batch.nrows() };
        Ok((h, cache))
    }

    /// Eval-mode outputs without keeping a cache.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        if self.mode != Mode::Eval {
            return Err(QgtError::InvalidState("predict requires eval mode".into()));
        }
        self.check_input(batch)?;
        Ok(self.layers.iter().fold(batch.clone(), |h, layer| layer.infer(h)))
    }

    /// Reverse pass for the loss whose gradient w.r.t. the outputs is
    /// `output_grad`. Returns the parameter gradients and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Array2<f64>) -> Result<(GradientSet, Array2<f64>)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(QgtError::InvalidState("forward cache is stale for this model".into()));
        }
        if output_grad.dim() != (cache.batch, self.output_dim) {
            return invalid(format!(
                "output gradient shape {:?} does not match ({}, {})",
                output_grad.dim(),
                cache.batch,
                self.output_dim
            ));
        }
        let mut per_layer: Vec<Vec<Array1<f64>>> = Vec::with_capacity(self.layers.len());
        let mut grad = output_grad.clone();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if !layer.cache_matches(lc) {
                return Err(QgtError::InvalidState("forward cache does not match model layers".into()));
            }
            let (dx, params) = layer.backward(lc, grad);
            per_layer.push(params);
            grad = dx;
        }
        let tensors = per_layer.into_iter().rev().flatten().collect();
        Ok((GradientSet { tensors }, grad))
    }

    /// Exact Jacobian `d f / d y` (shape `N x M`) of the eval-mode network at `y`.
    ///
    /// Propagates the `M` input directions forward through the network, so
    /// row `j` is the gradient of output `j`.
    pub fn jacobian(&self, y: ArrayView1<f64>) -> Result<Array2<f64>> {
        if self.mode != Mode::Eval {
            return Err(QgtError::InvalidState("jacobian requires eval mode".into()));
        }
        if y.len() != self.input_dim {
            return invalid(format!("input length {} does not match input dim {}", y.len(), self.input_dim));
        }
        let mut h = y.to_owned();
        let mut jac = Array2::<f64>::eye(self.input_dim);
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    h = d.weight.dot(&h) + &d.bias;
                    jac = d.weight.dot(&jac);
                }
                Layer::LeakyRelu { slope, .. } => {
                    for (mut row, v) in jac.rows_mut().into_iter().zip(h.iter_mut()) {
                        row *= leaky_grad(*v, *slope);
                        *v = leaky(*v, *slope);
                    }
                }
                Layer::BatchNorm(bn) => {
                    let (scale, shift) = bn.eval_affine();
                    for (mut row, &s) in jac.rows_mut().into_iter().zip(scale.iter()) {
                        row *= s;
                    }
                    h = h * &scale + &shift;
                }
                Layer::Dropout { .. } => {}
            }
        }
        Ok(jac)
    }
}

fn init_dense<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Dense {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Dense {
        weight: Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound)),
        bias: Array1::zeros(fan_out),
    }
}

#[cfg(test)]
mod tests;
