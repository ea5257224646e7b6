//! Support-recovery measures: precision, recall, F1, exact success and
//! post-threshold MSE, per sample and averaged over a split.
//!
//! Empty-denominator conventions: no predicted positives with missed
//! defectives gives precision 0; no true defectives with false alarms gives
//! recall 0; an empty truth recovered as empty scores 1 on all three.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub success: f64,
    pub mse: f64,
}

pub fn sample_metrics(truth: ArrayView1<u8>, pred: ArrayView1<u8>) -> Result<SampleMetrics> {
    if truth.len() != pred.len() || truth.is_empty() {
        return invalid(format!("truth ({}) and prediction ({}) must be non-empty and equally long", truth.len(), pred.len()));
    }
    if truth.iter().chain(pred.iter()).any(|&v| v > 1) {
        return invalid("metric inputs must be binary");
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(pred.iter()) {
        match (t, p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    let errors = fp + fn_;
    if tp + errors == 0 {
        return Ok(SampleMetrics { precision: 1.0, recall: 1.0, f1: 1.0, success: 1.0, mse: 0.0 });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(SampleMetrics {
        precision,
        recall,
        f1,
        success: if errors == 0 { 1.0 } else { 0.0 },
        mse: errors as f64 / truth.len() as f64,
    })
}

/// Per-sample measures and their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
    pub count: usize,
}

pub fn aggregate(samples: Vec<SampleMetrics>) -> Result<MetricsReport> {
    if samples.is_empty() {
        return invalid("cannot aggregate an empty list of samples");
    }
    let n = samples.len() as f64;
    let mut sum = SampleMetrics { precision: 0.0, recall: 0.0, f1: 0.0, success: 0.0, mse: 0.0 };
    for s in &samples {
        sum.precision += s.precision;
        sum.recall += s.recall;
        sum.f1 += s.f1;
        sum.success += s.success;
        sum.mse += s.mse;
    }
    let mean = SampleMetrics {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
        success: sum.success / n,
        mse: sum.mse / n,
    };
    Ok(MetricsReport { count: samples.len(), samples, mean })
}

/// Scores every row of `preds` against the matching row of `truth`.
pub fn evaluate_rows(truth: ndarray::ArrayView2<u8>, preds: ndarray::ArrayView2<u8>) -> Result<MetricsReport> {
    if truth.dim() != preds.dim() {
        return invalid("truth and prediction matrices differ in shape");
    }
    let samples = truth
        .rows()
        .into_iter()
        .zip(preds.rows())
        .map(|(t, p)| sample_metrics(t, p))
        .collect::<Result<Vec<_>>>()?;
    aggregate(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::stream_rng;
    use approx::assert_relative_eq;
    use ndarray::{array, Array1, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hand_counted_example() {
        let m = sample_metrics(array![1, 1, 0, 0].view(), array![1, 0, 1, 0].view()).unwrap();
        assert_eq!(m, SampleMetrics { precision: 0.5, recall: 0.5, f1: 0.5, success: 0.0, mse: 0.5 });
    }

    #[test]
    fn perfect_recovery() {
        let x = array![0, 1, 0, 1, 1];
        let m = sample_metrics(x.view(), x.view()).unwrap();
        assert_eq!(m, SampleMetrics { precision: 1.0, recall: 1.0, f1: 1.0, success: 1.0, mse: 0.0 });
    }

    #[test]
    fn empty_truth_and_prediction() {
        let z = Array1::<u8>::zeros(6);
        let m = sample_metrics(z.view(), z.view()).unwrap();
        assert_eq!(m, SampleMetrics { precision: 1.0, recall: 1.0, f1: 1.0, success: 1.0, mse: 0.0 });
    }

    #[test]
    fn degenerate_denominators() {
        let m = sample_metrics(array![1, 0, 0].view(), array![0, 0, 0].view()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = sample_metrics(array![0, 0, 0].view(), array![0, 1, 0].view()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn invalid_inputs() {
        assert!(sample_metrics(array![2, 0].view(), array![1, 0].view()).is_err());
        assert!(sample_metrics(array![1, 0].view(), array![1].view()).is_err());
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn aggregate_means() {
        let a = sample_metrics(array![1, 0].view(), array![1, 0].view()).unwrap();
        let b = sample_metrics(array![1, 0].view(), array![0, 1].view()).unwrap();
        let single = aggregate(vec![a]).unwrap();
        assert_eq!(single.mean, a);
        let both = aggregate(vec![a, b]).unwrap();
        assert_relative_eq!(both.mean.success, 0.5);
        assert_eq!(both.count, 2);
    }

    #[test]
    fn large_report_matches_streaming_recomputation() {
        let mut rng = stream_rng(12, 0, 0);
        let truth = Array2::from_shape_simple_fn((14_900, 100), || u8::from(rng.random_bool(0.06)));
        let preds = truth.mapv(|t| if rng.random_bool(0.02) { 1 - t } else { t });
        let report = evaluate_rows(truth.view(), preds.view()).unwrap();
        // Welford running means, independent of the summation in aggregate.
        let mut running = [0.0f64; 5];
        for (k, s) in report.samples.iter().enumerate() {
            let vals = [s.precision, s.recall, s.f1, s.success, s.mse];
            for (r, v) in running.iter_mut().zip(vals) {
                *r += (v - *r) / (k + 1) as f64;
            }
        }
        let m = report.mean;
        for (r, v) in running.iter().zip([m.precision, m.recall, m.f1, m.success, m.mse]) {
            assert_relative_eq!(*r, v, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn measure_relationships(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..40)) {
            let truth: Array1<u8> = bits.iter().map(|b| b.0).collect();
            let pred: Array1<u8> = bits.iter().map(|b| b.1).collect();
            let m = sample_metrics(truth.view(), pred.view()).unwrap();
            for v in [m.precision, m.recall, m.f1, m.mse] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(m.success == 1.0, m.mse == 0.0);
            let hamming = truth.iter().zip(pred.iter()).filter(|(a, b)| a != b).count();
            prop_assert!((m.mse - hamming as f64 / truth.len() as f64).abs() < 1e-15);
            let tp = truth.iter().zip(pred.iter()).filter(|(a, b)| **a == 1 && **b == 1).count();
            if m.precision + m.recall > 0.0 && hamming + tp > 0 {
                let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                prop_assert!((m.f1 - f1).abs() < 1e-12);
            }
            if tp == 0 && hamming > 0 {
                prop_assert_eq!(m.f1, 0.0);
            }
        }
    }
}
