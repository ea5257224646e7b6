//! Balanced squared-error objective, mini-batch Adam training with early
//! stopping on validation loss, threshold calibration and binary decoding.

use log::{debug, info};
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QgtError, Result};
use crate::generate::{stream, stream_rng, Dataset, Measurement};
use crate::nn::{AdamConfig, AdamState, Mlp, Mode};

/// Rows per chunk when running inference over a whole split.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    BalancedMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 128, learning_rate: 1e-3, max_epochs: 200, patience: 10, seed: 0, loss: LossVariant::BalancedMse }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return invalid(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.patience < 1 {
            return invalid("patience must be at least 1");
        }
        if self.max_epochs < 1 {
            return invalid("max epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample training loss of each epoch (train mode).
    pub train_loss: Vec<f64>,
    /// Mean per-sample validation loss after each epoch (eval mode).
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }

    /// `epoch,train_loss,val_loss` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, t, v));
        }
        out
    }
}

/// Per-sample balanced squared error summed over the batch, and its gradient
/// with respect to `preds`.
///
/// For each sample the squared error is averaged separately over defective
/// and non-defective coordinates and the two averages are added; the batch
/// loss is half the sum over samples. A class with no coordinates in a
/// sample contributes nothing.
pub fn balanced_mse(targets: ArrayView2<f64>, preds: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if targets.dim() != preds.dim() {
        return invalid(format!("targets {:?} and predictions {:?} differ in shape", targets.dim(), preds.dim()));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return invalid("targets must be binary");
    }
    let mut grad = Array2::<f64>::zeros(preds.raw_dim());
    let mut loss = 0.0;
    for ((t, p), mut g) in targets.rows().into_iter().zip(preds.rows()).zip(grad.rows_mut()) {
        let positives = t.iter().filter(|&&v| v == 1.0).count();
        let negatives = t.len() - positives;
        let (mut pos_sq, mut neg_sq) = (0.0, 0.0);
        for (&tj, &pj) in t.iter().zip(p.iter()) {
            let e = pj - tj;
            if tj == 1.0 {
                pos_sq += e * e;
            } else {
                neg_sq += e * e;
            }
        }
        if positives > 0 {
            loss += 0.5 * pos_sq / positives as f64;
        }
        if negatives > 0 {
            loss += 0.5 * neg_sq / negatives as f64;
        }
        Zip::from(&mut g).and(&t).and(&p).for_each(|gj, &tj, &pj| {
            let count = if tj == 1.0 { positives } else { negatives };
            *gj = (pj - tj) / count as f64;
        });
    }
    Ok((loss, grad))
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    /// Records one epoch's validation loss. Returns `true` if it is a new best.
    pub fn record(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Eval-mode outputs for every sample of `inputs`, computed in chunks.
pub fn predict_all(model: &Mlp, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((inputs.nrows(), model.output_dim()));
    let mut start = 0;
    while start < inputs.nrows() {
        let end = (start + EVAL_CHUNK).min(inputs.nrows());
        let chunk = model.predict(&inputs.slice(s![start..end, ..]).to_owned())?;
        out.slice_mut(s![start..end, ..]).assign(&chunk);
        start = end;
    }
    Ok(out)
}

/// Mean per-sample balanced loss of `model` (eval mode) on a split.
pub fn mean_loss(model: &Mlp, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    let preds = predict_all(model, inputs)?;
    let (loss, _) = balanced_mse(targets.view(), preds.view())?;
    Ok(loss / inputs.nrows() as f64)
}

fn check_split(model: &Mlp, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return invalid(format!("{what} split is empty"));
    }
    if ds.gen_config.m != model.input_dim() || ds.gen_config.n != model.output_dim() {
        return invalid(format!(
            "{what} split is {}x{} (MxN) but the model maps {} -> {}",
            ds.gen_config.m,
            ds.gen_config.n,
            model.input_dim(),
            model.output_dim()
        ));
    }
    Ok(())
}

/// Trains `model` and returns the parameter snapshot with the lowest
/// validation loss, in eval mode.
///
/// Each epoch visits the training split in a fresh permutation drawn from
/// `(cfg.seed, epoch)`; optimizer steps use the batch-mean gradient. A
/// trailing batch of a single row is skipped because batchnorm needs two.
pub fn train(mut model: Mlp, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    cfg.validate()?;
    check_split(&model, train_set, "training")?;
    check_split(&model, val_set, "validation")?;

    let train_x = train_set.inputs_f64();
    let train_y = train_set.targets_f64();
    let val_x = val_set.inputs_f64();
    let val_y = val_set.targets_f64();

    let mut adam = AdamState::new(&model, AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.max_epochs {
        model.set_mode(Mode::Train);
        let mut rng = stream_rng(cfg.seed, stream::TRAINING, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let xb = train_x.select(Axis(0), idx);
            let yb = train_y.select(Axis(0), idx);
            let (out, cache) = model.forward(&xb, &mut rng)?;
            let (loss, mut grad) = balanced_mse(yb.view(), out.view())?;
            if !loss.is_finite() {
                return Err(QgtError::TrainingDiverged(format!("non-finite training loss at epoch {}", epoch + 1)));
            }
            grad /= idx.len() as f64;
            let (grads, _) = model.backward(&cache, &grad)?;
            adam.step(&mut model, &grads)?;
            epoch_loss += loss;
            seen += idx.len();
        }
        model.set_mode(Mode::Eval);
        let val_loss = mean_loss(&model, &val_x, &val_y)?;
        if !val_loss.is_finite() {
            return Err(QgtError::TrainingDiverged(format!("non-finite validation loss at epoch {}", epoch + 1)));
        }
        let train_loss = if seen > 0 { epoch_loss / seen as f64 } else { f64::NAN };
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        debug!("epoch {:>3}: train {:.5} val {:.5}", epoch + 1, train_loss, val_loss);
        if stopper.record(val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    info!(
        "training stopped after {} epochs; best epoch {} (val {:.5})",
        history.epochs_run(),
        history.best_epoch,
        history.best_val_loss()
    );
    best.set_mode(Mode::Eval);
    Ok((best, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
}

/// Validation success rate attained by every threshold, summarized as one
/// success interval per sample.
///
/// Sample `i` is decoded exactly iff `lo_i < tau <= hi_i`, where `lo_i` is
/// its largest prediction on a non-defective coordinate and `hi_i` its
/// smallest prediction on a defective one.
struct SuccessIntervals {
    lows: Vec<f64>,
    highs: Vec<f64>,
    samples: usize,
}

impl SuccessIntervals {
    fn new(targets: ArrayView2<u8>, preds: ArrayView2<f64>) -> Self {
        let mut lows = Vec::new();
        let mut highs = Vec::new();
        for (t, p) in targets.rows().into_iter().zip(preds.rows()) {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for (&tj, &pj) in t.iter().zip(p.iter()) {
                if tj == 1 {
                    hi = hi.min(pj);
                } else {
                    lo = lo.max(pj);
                }
            }
            if lo < hi {
                lows.push(lo);
                highs.push(hi);
            }
        }
        lows.sort_by(f64::total_cmp);
        highs.sort_by(f64::total_cmp);
        Self { lows, highs, samples: targets.nrows() }
    }

    /// Number of samples decoded exactly at `tau`.
    fn successes(&self, tau: f64) -> usize {
        // Every valid interval with hi < tau also has lo < tau.
        let above_low = self.lows.partition_point(|&l| l < tau);
        let below_tau = self.highs.partition_point(|&h| h < tau);
        above_low - below_tau
    }
}

/// Picks the threshold maximizing validation success rate.
///
/// Candidates are the midpoints between consecutive distinct predicted
/// values over the whole split plus one value below the minimum and one
/// above the maximum. Success rate is constant between predicted values, so
/// no other threshold does better. Ties go to the smallest candidate.
pub fn calibrate_threshold(model: &Mlp, val_set: &Dataset) -> Result<Threshold> {
    if val_set.is_empty() {
        return invalid("validation split is empty");
    }
    let preds = predict_all(model, &val_set.inputs_f64())?;
    calibrate_from_predictions(val_set.signals.view(), preds.view())
}

/// [`calibrate_threshold`] on precomputed raw outputs.
pub fn calibrate_from_predictions(targets: ArrayView2<u8>, preds: ArrayView2<f64>) -> Result<Threshold> {
    if targets.dim() != preds.dim() || targets.is_empty() {
        return invalid("targets and predictions must be non-empty and of equal shape");
    }
    if preds.iter().any(|v| !v.is_finite()) {
        return invalid("predictions must be finite");
    }
    let intervals = SuccessIntervals::new(targets, preds);
    let mut values: Vec<f64> = preds.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let first = values[0];
    let last = values[values.len() - 1];
    let candidates = std::iter::once(first - 1.0)
        .chain(values.windows(2).map(|w| 0.5 * (w[0] + w[1])))
        .chain(std::iter::once(last + 1.0));

    let mut best = (0usize, f64::NAN);
    for tau in candidates {
        let hits = intervals.successes(tau);
        if best.1.is_nan() || hits > best.0 {
            best = (hits, tau);
        }
    }
    debug!("calibrated tau {:.5} with success rate {:.4}", best.1, best.0 as f64 / intervals.samples as f64);
    Ok(Threshold { tau: best.1 })
}

/// Elementwise `x_j >= tau`.
pub fn threshold_outputs(outputs: ArrayView2<f64>, tau: Threshold) -> Array2<u8> {
    outputs.mapv(|v| u8::from(v >= tau.tau))
}

/// Decodes one measurement into a binary defect estimate.
pub fn decode(model: &Mlp, y: &Measurement, tau: Threshold) -> Result<Array1<u8>> {
    let input = y.to_f64().insert_axis(Axis(0));
    let out = model.predict(&input)?;
    Ok(threshold_outputs(out.view(), tau).row(0).to_owned())
}
