//! JSON model checkpoints.
//!
//! A checkpoint carries the architecture, every layer's hyperparameters and
//! flat row-major parameter arrays, plus (when known) the data generation
//! config, the training config and the calibrated threshold.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generate::GenConfig;
use crate::nn::{BatchNorm, Dense, Layer, Mlp};
use crate::train::{Threshold, TrainConfig, TrainHistory};

pub const FORMAT: &str = "qgt-mlp/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub complexity_level: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerRecord {
    Dense { in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64> },
    LeakyRelu { dim: usize, slope: f64 },
    Batchnorm {
        dim: usize,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        momentum: f64,
        eps: f64,
    },
    Dropout { dim: usize, p: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub gen_config: Option<GenConfig>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub threshold: Option<Threshold>,
    #[serde(default)]
    pub history: Option<TrainHistory>,
}

fn record(layer: &Layer) -> LayerRecord {
    let flat = |a: &Array1<f64>| a.to_vec();
    match layer {
        Layer::Dense(d) => LayerRecord::Dense {
            in_dim: d.weight.ncols(),
            out_dim: d.weight.nrows(),
            weight: d.weight.iter().copied().collect(),
            bias: flat(&d.bias),
        },
        Layer::LeakyRelu { dim, slope } => LayerRecord::LeakyRelu { dim: *dim, slope: *slope },
        Layer::BatchNorm(bn) => LayerRecord::Batchnorm {
            dim: bn.gamma.len(),
            gamma: flat(&bn.gamma),
            beta: flat(&bn.beta),
            running_mean: flat(&bn.running_mean),
            running_var: flat(&bn.running_var),
            momentum: bn.momentum,
            eps: bn.eps,
        },
        Layer::Dropout { dim, p } => LayerRecord::Dropout { dim: *dim, p: *p },
    }
}

fn vector(values: &[f64], dim: usize, what: &str) -> Result<Array1<f64>> {
    if values.len() != dim {
        return invalid(format!("{what} has {} values, expected {dim}", values.len()));
    }
    Ok(Array1::from(values.to_vec()))
}

fn layer(rec: &LayerRecord) -> Result<Layer> {
    Ok(match rec {
        LayerRecord::Dense { in_dim, out_dim, weight, bias } => {
            let weight = Array2::from_shape_vec((*out_dim, *in_dim), weight.clone())
                .map_err(|e| crate::QgtError::Format(format!("dense weight: {e}")))?;
            Layer::Dense(Dense { weight, bias: vector(bias, *out_dim, "dense bias")? })
        }
        LayerRecord::LeakyRelu { dim, slope } => Layer::LeakyRelu { dim: *dim, slope: *slope },
        LayerRecord::Batchnorm { dim, gamma, beta, running_mean, running_var, momentum, eps } => {
            Layer::BatchNorm(BatchNorm {
                gamma: vector(gamma, *dim, "batchnorm gamma")?,
                beta: vector(beta, *dim, "batchnorm beta")?,
                running_mean: vector(running_mean, *dim, "batchnorm running mean")?,
                running_var: vector(running_var, *dim, "batchnorm running variance")?,
                momentum: *momentum,
                eps: *eps,
            })
        }
        LayerRecord::Dropout { dim, p } => Layer::Dropout { dim: *dim, p: *p },
    })
}

impl Checkpoint {
    pub fn from_model(model: &Mlp) -> Self {
        Self {
            format: FORMAT.to_string(),
            architecture: Architecture {
                input_dim: model.input_dim(),
                output_dim: model.output_dim(),
                hidden: model.hidden(),
                complexity_level: model.complexity_level,
            },
            layers: model.layers().iter().map(record).collect(),
            gen_config: None,
            train_config: None,
            threshold: None,
            history: None,
        }
    }

    /// Rebuilds the model in eval mode.
    pub fn to_model(&self) -> Result<Mlp> {
        if self.format != FORMAT {
            return invalid(format!("unsupported checkpoint format `{}`", self.format));
        }
        let layers = self.layers.iter().map(layer).collect::<Result<Vec<_>>>()?;
        let model = Mlp::from_layers(layers, self.architecture.complexity_level)?;
        if model.input_dim() != self.architecture.input_dim
            || model.output_dim() != self.architecture.output_dim
            || model.hidden() != self.architecture.hidden
        {
            return invalid("checkpoint layers disagree with its architecture descriptor");
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
