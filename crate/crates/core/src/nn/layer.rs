use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::Mode;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const DROPOUT_P: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Fully connected layer `y = W x + b`, with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Per-feature `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> (Array1<f64>, Array1<f64>) {
        let scale = Zip::from(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&g, &v| g / (v + self.eps).sqrt());
        let shift = &self.beta - &(&scale * &self.running_mean);
        (scale, shift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    LeakyRelu { dim: usize, slope: f64 },
    BatchNorm(BatchNorm),
    /// `p` is the drop probability.
    Dropout { dim: usize, p: f64 },
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.ncols(),
            Layer::LeakyRelu { dim, .. } | Layer::Dropout { dim, .. } => *dim,
            Layer::BatchNorm(bn) => bn.gamma.len(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.nrows(),
            other => other.in_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Dropout { .. } => "dropout",
        }
    }
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Dense { input: Array2<f64> },
    LeakyRelu { input: Array2<f64> },
    BatchNormTrain { normalized: Array2<f64>, inv_std: Array1<f64> },
    BatchNormEval { normalized: Array2<f64>, inv_std: Array1<f64> },
    Dropout { mask: Option<Array2<f64>> },
}

pub(crate) fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub(crate) fn leaky_grad(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

impl Layer {
    /// Forward pass without a cache; eval semantics only.
    pub(crate) fn infer(&self, x: Array2<f64>) -> Array2<f64> {
        match self {
            Layer::Dense(d) => {
                let mut y = x.dot(&d.weight.t());
                y += &d.bias;
                y
            }
            Layer::LeakyRelu { slope, .. } => {
                let s = *slope;
                x.mapv_into(|v| leaky(v, s))
            }
            Layer::BatchNorm(bn) => {
                let (scale, shift) = bn.eval_affine();
                let mut y = x;
                y *= &scale;
                y += &shift;
                y
            }
            Layer::Dropout { .. } => x,
        }
    }

    pub(crate) fn forward<R: Rng + ?Sized>(
        &mut self,
        x: Array2<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> (Array2<f64>, LayerCache) {
        match self {
            Layer::Dense(_) => {
                let y = self.infer(x.clone());
                (y, LayerCache::Dense { input: x })
            }
            Layer::LeakyRelu { slope, .. } => {
                let s = *slope;
                let y = x.mapv(|v| leaky(v, s));
                (y, LayerCache::LeakyRelu { input: x })
            }
            Layer::BatchNorm(bn) => match mode {
                Mode::Train => batchnorm_train(bn, x),
                Mode::Eval => {
                    let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let mut normalized = x;
                    normalized -= &bn.running_mean;
                    normalized *= &inv_std;
                    let mut y = &normalized * &bn.gamma;
                    y += &bn.beta;
                    (y, LayerCache::BatchNormEval { normalized, inv_std })
                }
            },
            Layer::Dropout { p, .. } => match mode {
                Mode::Train if *p > 0.0 => {
                    let keep = 1.0 - *p;
                    let drop = *p;
                    let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() < drop {
                            0.0
                        } else {
                            1.0 / keep
                        }
                    });
                    let y = &x * &mask;
                    (y, LayerCache::Dropout { mask: Some(mask) })
                }
                _ => (x, LayerCache::Dropout { mask: None }),
            },
        }
    }

    /// Returns the input gradient and, for trainable layers, the parameter
    /// gradients in canonical order.
    pub(crate) fn backward(&self, cache: &LayerCache, grad: Array2<f64>) -> (Array2<f64>, Vec<Array1<f64>>) {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => {
                let dw = grad.t().dot(input);
                let db = grad.sum_axis(Axis(0));
                let dx = grad.dot(&d.weight);
                let dw = dw.into_shape_with_order(d.weight.len()).expect("contiguous weight grad");
                (dx, vec![dw, db])
            }
            (Layer::LeakyRelu { slope, .. }, LayerCache::LeakyRelu { input }) => {
                let s = *slope;
                let mut dx = grad;
                Zip::from(&mut dx).and(input).for_each(|g, &v| *g *= leaky_grad(v, s));
                (dx, Vec::new())
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNormTrain { normalized, inv_std }) => {
                let b = grad.nrows() as f64;
                let dgamma = (&grad * normalized).sum_axis(Axis(0));
                let dbeta = grad.sum_axis(Axis(0));
                // dx = inv_std * gamma / B * (B * dy - sum(dy) - xhat * sum(dy * xhat))
                let coef = &bn.gamma * inv_std / b;
                let mut dx = grad * b;
                dx -= &dbeta;
                dx -= &(normalized * &dgamma);
                dx *= &coef;
                (dx, vec![dgamma, dbeta])
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNormEval { normalized, inv_std }) => {
                let dgamma = (&grad * normalized).sum_axis(Axis(0));
                let dbeta = grad.sum_axis(Axis(0));
                let mut dx = grad;
                dx *= &(&bn.gamma * inv_std);
                (dx, vec![dgamma, dbeta])
            }
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let dx = match mask {
                    Some(m) => grad * m,
                    None => grad,
                };
                (dx, Vec::new())
            }
            _ => unreachable!("layer/cache kinds are checked by the caller"),
        }
    }

    pub(crate) fn cache_matches(&self, cache: &LayerCache) -> bool {
        matches!(
            (self, cache),
            (Layer::Dense(_), LayerCache::Dense { .. })
                | (Layer::LeakyRelu { .. }, LayerCache::LeakyRelu { .. })
                | (Layer::BatchNorm(_), LayerCache::BatchNormTrain { .. })
                | (Layer::BatchNorm(_), LayerCache::BatchNormEval { .. })
                | (Layer::Dropout { .. }, LayerCache::Dropout { .. })
        )
    }
}

fn batchnorm_train(bn: &mut BatchNorm, x: Array2<f64>) -> (Array2<f64>, LayerCache) {
    let b = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let mut centered = x;
    centered -= &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b;
    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    let mut normalized = centered;
    normalized *= &inv_std;
    let mut y = &normalized * &bn.gamma;
    y += &bn.beta;

    // Running variance tracks the unbiased estimate.
    let mom = bn.momentum;
    let unbias = b / (b - 1.0);
    Zip::from(&mut bn.running_mean).and(&mean).for_each(|r, &m| *r = (1.0 - mom) * *r + mom * m);
    Zip::from(&mut bn.running_var).and(&var).for_each(|r, &v| *r = (1.0 - mom) * *r + mom * v * unbias);

    (y, LayerCache::BatchNormTrain { normalized, inv_std })
}
