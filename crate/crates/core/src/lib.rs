//! Neural decoding for quantitative group testing, with Jacobian-based
//! recovery of the pooling design from a trained decoder.
//!
//! - [`generate`]: pooling designs, sparse signals, sparse integer noise, datasets.
//! - [`nn`]: dense decoder with batchnorm/dropout, backprop, Adam and exact Jacobians.
//! - [`train`]: balanced squared-error loss, early-stopped training, threshold calibration.
//! - [`verify`]: pooling-matrix recovery from Jacobians and mismatch scoring.
//! - [`metrics`]: precision, recall, F1, success rate and MSE.
//! - [`io`], [`checkpoint`]: dataset files, CSV exports and model checkpoints.

pub mod checkpoint;
pub mod error;
pub mod generate;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod train;
pub mod verify;

pub use error::{QgtError, Result};
pub use generate::{Dataset, GenConfig, Measurement, PoolingMatrix, Split, SplitSizes};
pub use metrics::{MetricsReport, SampleMetrics};
pub use nn::{Mlp, Mode};
pub use train::{Threshold, TrainConfig, TrainHistory};
