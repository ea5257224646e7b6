//! Structural verification: recovers a pooling design from the Jacobians of
//! a trained decoder and measures how far it is from the true design.
//!
//! The relaxed estimate is the least-squares matrix `C` (shape `M x N`)
//! minimizing `sum_i ||I_M - C B_i||_F^2` over the Jacobians `B_i` (shape
//! `N x M`). Setting the gradient to zero gives the normal equations
//! `C G = S` with `G = sum_i B_i B_i^T` and `S = sum_i B_i^T`, which are
//! solved by Cholesky factorization of the symmetric Gram matrix `G`.

use log::{debug, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QgtError, Result};
use crate::generate::{Measurement, PoolingMatrix};
use crate::nn::Mlp;

/// Gram matrices with a larger eigenvalue ratio get a ridge term.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge strength relative to the mean Gram eigenvalue `trace(G) / N`.
pub const RIDGE_SCALE: f64 = 1e-8;

/// Local sensitivities `B_i = d f / d y` at a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBatch {
    pub matrices: Vec<Array2<f64>>,
    pub source: String,
}

impl JacobianBatch {
    pub fn new(matrices: Vec<Array2<f64>>, source: impl Into<String>) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return invalid("a Jacobian batch needs at least one matrix");
        };
        let dim = first.dim();
        if matrices.iter().any(|b| b.dim() != dim) {
            return invalid("all Jacobians in a batch must share one shape");
        }
        if matrices.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return invalid("Jacobian entries must be finite");
        }
        Ok(Self { matrices, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Output dimension `N`.
    pub fn items(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// Input dimension `M`.
    pub fn tests(&self) -> usize {
        self.matrices[0].ncols()
    }

    /// `sum_i ||I_M - C B_i||_F^2`.
    pub fn objective(&self, c: &Array2<f64>) -> f64 {
        let eye = Array2::<f64>::eye(self.tests());
        self.matrices
            .iter()
            .map(|b| {
                let r = &eye - &c.dot(b);
                r.iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }

    /// `(G, S)` with `G = sum_i B_i B_i^T` and `S = sum_i B_i^T`, accumulated
    /// in batch order.
    pub fn normal_equations(&self) -> (Array2<f64>, Array2<f64>) {
        let (n, m) = (self.items(), self.tests());
        let mut gram = Array2::<f64>::zeros((n, n));
        let mut rhs = Array2::<f64>::zeros((m, n));
        for b in &self.matrices {
            gram += &b.dot(&b.t());
            rhs += &b.t();
        }
        (gram, rhs)
    }
}

/// Jacobians of `model` at the first `t` inputs, in order.
pub fn collect_jacobians(model: &Mlp, inputs: &[Measurement], t: usize) -> Result<JacobianBatch> {
    if t == 0 {
        return invalid("T must be at least 1");
    }
    if inputs.len() < t {
        return invalid(format!("requested T={t} Jacobians but only {} inputs are available", inputs.len()));
    }
    let matrices = inputs[..t].iter().map(|y| model.jacobian(y.to_f64().view())).collect::<Result<Vec<_>>>()?;
    JacobianBatch::new(matrices, format!("{t} measurements"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedEstimate {
    /// `M x N` real estimate of the pooling matrix.
    pub values: Array2<f64>,
    pub ridge_applied: bool,
    pub ridge_lambda: f64,
    /// Eigenvalue ratio of the Gram matrix before any ridge term.
    pub condition: f64,
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn condition_number(gram: &Array2<f64>) -> f64 {
    let eig = SymmetricEigen::new(to_nalgebra(gram));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Closed-form least-squares estimate of the pooling matrix.
///
/// When the Gram matrix condition estimate exceeds [`MAX_CONDITION`], a ridge
/// `lambda I` with `lambda = RIDGE_SCALE * trace(G) / N` is added and flagged.
pub fn solve_relaxed(batch: &JacobianBatch) -> Result<RelaxedEstimate> {
    let (mut gram, rhs) = batch.normal_equations();
    let n = gram.nrows();
    let condition = condition_number(&gram);
    let mut ridge_lambda = 0.0;
    if condition > MAX_CONDITION {
        ridge_lambda = RIDGE_SCALE * gram.diag().sum() / n as f64;
        if ridge_lambda <= 0.0 || !ridge_lambda.is_finite() {
            return Err(QgtError::SingularSystem { condition, ridge_applied: false });
        }
        warn!("Gram matrix condition {condition:.3e} exceeds {MAX_CONDITION:.0e}; adding ridge {ridge_lambda:.3e}");
        gram.diag_mut().mapv_inplace(|v| v + ridge_lambda);
        let ridged = condition_number(&gram);
        if ridged > MAX_CONDITION {
            return Err(QgtError::SingularSystem { condition: ridged, ridge_applied: true });
        }
    }
    let ridge_applied = ridge_lambda > 0.0;
    let chol = to_nalgebra(&gram)
        .cholesky()
        .ok_or(QgtError::SingularSystem { condition, ridge_applied })?;
    // C G = S  <=>  G C^T = S^T since G is symmetric.
    let solution = chol.solve(&to_nalgebra(&rhs.t().to_owned()));
    let values = Array2::from_shape_fn((rhs.nrows(), n), |(i, j)| solution[(j, i)]);
    debug!("relaxed estimate solved (condition {condition:.3e}, ridge {ridge_applied})");
    Ok(RelaxedEstimate { values, ridge_applied, ridge_lambda, condition })
}

/// `||C G - S||_F / ||S||_F` for the system actually solved (ridge included).
pub fn normal_equation_residual(batch: &JacobianBatch, est: &RelaxedEstimate) -> f64 {
    let (mut gram, rhs) = batch.normal_equations();
    gram.diag_mut().mapv_inplace(|v| v + est.ridge_lambda);
    let resid = est.values.dot(&gram) - &rhs;
    frobenius(&resid) / frobenius(&rhs)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredPooling {
    pub values: Array2<u8>,
    /// Cluster centers `(zero class, one class)`.
    pub centroids: (f64, f64),
}

impl RecoveredPooling {
    pub fn to_pooling(&self) -> Result<PoolingMatrix> {
        PoolingMatrix::from_entries(self.values.clone())
    }
}

const MAX_LLOYD_ITERS: usize = 10_000;

/// Lloyd iterations from `centroids` until no assignment changes.
fn lloyd(values: &Array2<f64>, mut centroids: (f64, f64)) -> (Array2<u8>, (f64, f64)) {
    let mut labels = Array2::<u8>::zeros(values.raw_dim());
    for iter in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        Zip::from(&mut labels).and(values).for_each(|l, &v| {
            let next = u8::from((v - centroids.1).abs() < (v - centroids.0).abs());
            changed |= *l != next;
            *l = next;
        });
        if !changed && iter > 0 {
            break;
        }
        let (mut sum, mut count) = ([0.0f64; 2], [0usize; 2]);
        Zip::from(&labels).and(values).for_each(|&l, &v| {
            sum[l as usize] += v;
            count[l as usize] += 1;
        });
        // The minimum stays with cluster 0 and the maximum with cluster 1,
        // so neither cluster empties.
        centroids = (sum[0] / count[0] as f64, sum[1] / count[1] as f64);
    }
    (labels, centroids)
}

fn within_cluster_sse(values: &Array2<f64>, labels: &Array2<u8>, centroids: (f64, f64)) -> f64 {
    Zip::from(values).and(labels).fold(0.0, |acc, &v, &l| {
        let c = if l == 1 { centroids.1 } else { centroids.0 };
        acc + (v - c).powi(2)
    })
}

/// Centroids of the best split of the sorted entries, via prefix sums.
fn best_split(values: &Array2<f64>) -> (f64, (f64, f64)) {
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (total, total_sq) = sorted.iter().fold((0.0, 0.0), |(s, q), v| (s + v, q + v * v));
    let (mut left, mut left_sq) = (0.0, 0.0);
    let mut best = (f64::INFINITY, (sorted[0], sorted[n - 1]));
    for k in 1..n {
        left += sorted[k - 1];
        left_sq += sorted[k - 1] * sorted[k - 1];
        if sorted[k] == sorted[k - 1] {
            continue;
        }
        let (nl, nr) = (k as f64, (n - k) as f64);
        let right = total - left;
        let cost = (left_sq - left * left / nl) + ((total_sq - left_sq) - right * right / nr);
        if cost < best.0 {
            best = (cost, (left / nl, right / nr));
        }
    }
    best
}

/// Two-cluster 1-D k-means over all entries of the relaxed estimate.
///
/// Lloyd iterations start from the minimum and maximum entries and run until
/// no assignment changes. If the sorted-split optimum has a strictly lower
/// within-cluster sum of squares, Lloyd is rerun from its centroids so the
/// result is the global two-means partition. Entries nearer the larger
/// centroid become 1; exact ties go to 0.
pub fn binarize_kmeans(est: &RelaxedEstimate) -> Result<RecoveredPooling> {
    let values = &est.values;
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("relaxed estimate has non-finite entries");
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo >= hi {
        return Err(QgtError::DegenerateClustering(format!("all {} entries equal {lo}", values.len())));
    }
    let (mut labels, mut centroids) = lloyd(values, (lo, hi));
    let cost = within_cluster_sse(values, &labels, centroids);
    let (best_cost, best_centroids) = best_split(values);
    if best_cost < cost * (1.0 - 1e-12) {
        debug!("Lloyd from the extremes stopped at {cost:.6e}; reseeding at the optimum {best_cost:.6e}");
        (labels, centroids) = lloyd(values, best_centroids);
    }
    Ok(RecoveredPooling { values: labels, centroids })
}

/// Percentage of entries where the recovered design differs from the truth.
pub fn structural_error(recovered: &RecoveredPooling, truth: &PoolingMatrix) -> Result<f64> {
    if recovered.values.dim() != truth.entries().dim() {
        return invalid(format!(
            "recovered matrix {:?} and true matrix {:?} differ in shape",
            recovered.values.dim(),
            truth.entries().dim()
        ));
    }
    let mismatched = Zip::from(&recovered.values).and(truth.entries()).fold(0usize, |acc, a, b| acc + usize::from(a != b));
    Ok(100.0 * mismatched as f64 / recovered.values.len() as f64)
}

/// Outcome of the full Jacobian -> estimate -> binarize -> compare pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub t: usize,
    pub ridge_applied: bool,
    pub condition: f64,
    pub mismatch_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub relaxed: RelaxedEstimate,
    pub recovered: RecoveredPooling,
    pub summary: VerificationSummary,
}

pub fn verify_model(model: &Mlp, inputs: &[Measurement], t: usize, truth: &PoolingMatrix) -> Result<Verification> {
    let batch = collect_jacobians(model, inputs, t)?;
    let relaxed = solve_relaxed(&batch)?;
    let recovered = binarize_kmeans(&relaxed)?;
    let mismatch_percent = structural_error(&recovered, truth)?;
    let summary = VerificationSummary {
        t,
        ridge_applied: relaxed.ridge_applied,
        condition: relaxed.condition,
        mismatch_percent,
    };
    Ok(Verification { relaxed, recovered, summary })
}
