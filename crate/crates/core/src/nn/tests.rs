use super::*;
use crate::generate::stream_rng;
use approx::assert_relative_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Gives batchnorm layers non-trivial parameters and running statistics.
fn randomize_batchnorm(model: &mut Mlp, rng: &mut ChaCha8Rng) {
    for layer in &mut model.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            bn.running_mean.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
        }
    }
}

fn linear_model(weight: Array2<f64>, bias: Array1<f64>) -> Mlp {
    Mlp::from_layers(vec![Layer::Dense(Dense { weight, bias })], Some(1)).unwrap()
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

#[test]
fn paper_architecture_shapes() {
    let m = Mlp::build(35, 100, &[500, 500], 1).unwrap();
    let dense: Vec<(usize, usize)> = m
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some((d.weight.ncols(), d.weight.nrows())),
            _ => None,
        })
        .collect();
    assert_eq!(dense, vec![(35, 500), (500, 500), (500, 100)]);
    let kinds: Vec<&str> = m.layers().iter().map(Layer::kind).collect();
    assert_eq!(
        kinds,
        ["dense", "leaky_relu", "batchnorm", "dropout", "dense", "leaky_relu", "batchnorm", "dropout", "dense"]
    );
    assert_eq!(m.hidden(), vec![500, 500]);
}

#[test]
fn level_one_is_a_single_dense_map() {
    let m = Mlp::build_level(35, 100, 1, 3).unwrap();
    assert_eq!(m.layers().len(), 1);
    assert!(matches!(&m.layers()[0], Layer::Dense(d) if d.weight.dim() == (100, 35)));
    assert!(m.hidden().is_empty());
}

#[test]
fn level_seven_has_five_blocks() {
    let m = Mlp::build_level(35, 100, 7, 3).unwrap();
    assert_eq!(m.hidden(), vec![128, 256, 512, 256, 128]);
    assert_eq!(m.layers().len(), 5 * 4 + 1);
    assert!(hidden_for_level(0).is_err() && hidden_for_level(8).is_err());
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = Mlp::build(10, 6, &[8], 42).unwrap();
    let b = Mlp::build(10, 6, &[8], 42).unwrap();
    assert_eq!(a, b);
    if let Layer::Dense(d) = &a.layers()[0] {
        let bound = (6.0f64 / 18.0).sqrt();
        assert!(d.weight.iter().all(|w| w.abs() <= bound));
        assert!(d.bias.iter().all(|&v| v == 0.0));
    }
    if let Layer::BatchNorm(bn) = &a.layers()[2] {
        assert!(bn.running_mean.iter().all(|&v| v == 0.0));
        assert!(bn.running_var.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn linear_forward_is_exact() {
    let w = array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]];
    let b = array![0.1, 0.2, 0.3];
    let mut m = linear_model(w.clone(), b.clone());
    let x = array![[1.0, 1.0], [2.0, -1.0]];
    let out = m.predict(&x).unwrap();
    assert_eq!(out, x.dot(&w.t()) + &b);
    m.set_mode(Mode::Train);
    let (train_out, _) = m.forward(&x, &mut stream_rng(0, 0, 0)).unwrap();
    assert_eq!(train_out, out);
}

#[test]
fn leaky_relu_negative_slope() {
    let layer = Layer::LeakyRelu { dim: 1, slope: LEAKY_SLOPE };
    let y = layer.infer(array![[-1.0]]);
    assert_relative_eq!(y[[0, 0]], -0.01);
}

#[test]
fn eval_forward_is_repeatable() {
    let mut m = Mlp::build(5, 4, &[16, 16], 7).unwrap();
    m.set_mode(Mode::Eval);
    let x = random_matrix(3, 5, 3.0, &mut stream_rng(1, 0, 0));
    assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    let (f, _) = m.forward(&x, &mut stream_rng(2, 0, 0)).unwrap();
    let (g, _) = m.forward(&x, &mut stream_rng(3, 0, 0)).unwrap();
    assert_eq!(f, g);
}

#[test]
fn train_forward_rejects_single_row() {
    let mut m = Mlp::build(5, 4, &[8], 7).unwrap();
    let err = m.forward(&Array2::zeros((1, 5)), &mut stream_rng(0, 0, 0)).unwrap_err();
    assert!(matches!(err, QgtError::InvalidArgument(_)));
}

#[test]
fn train_forward_updates_running_stats() {
    let mut m = Mlp::build(3, 2, &[4], 1).unwrap();
    let x = random_matrix(6, 3, 2.0, &mut stream_rng(5, 0, 0));
    m.forward(&x, &mut stream_rng(0, 0, 0)).unwrap();
    let Layer::BatchNorm(bn) = &m.layers()[2] else { panic!() };
    assert!(bn.running_mean.iter().any(|&v| v != 0.0));
    assert!(bn.running_var.iter().any(|&v| v != 1.0));
}

#[test]
fn dropout_uses_inverted_scaling() {
    let mut layer = Layer::Dropout { dim: 200, p: 0.1 };
    let x = Array2::from_elem((50, 200), 1.0);
    let (y, _) = layer.forward(x, Mode::Train, &mut stream_rng(9, 0, 0));
    assert!(y.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
    assert!((kept - 0.9).abs() < 0.02, "kept fraction {kept}");
}

/// Central differences of `L = sum(R * f(x))` against backward, in train mode
/// with dropout masks held fixed by replaying the same RNG.
fn check_gradients(model: &Mlp, batch: &Array2<f64>, seed: u64) {
    let mut rng = stream_rng(seed, 0, 1);
    let weights = random_matrix(batch.nrows(), model.output_dim(), 1.0, &mut rng);
    let loss = |m: &Mlp| -> f64 {
        let mut m = m.clone();
        let (out, _) = m.forward(batch, &mut stream_rng(seed, 0, 2)).unwrap();
        (&out * &weights).sum()
    };
    let mut probe = model.clone();
    let (_, cache) = probe.forward(batch, &mut stream_rng(seed, 0, 2)).unwrap();
    let (grads, dx) = probe.backward(&cache, &weights).unwrap();

    let h = 1e-5;
    let n_tensors = model.param_slices().len();
    assert_eq!(grads.tensors.len(), n_tensors);
    for t in 0..n_tensors {
        for i in 0..model.param_slices()[t].len() {
            let mut plus = model.clone();
            plus.param_slices_mut()[t][i] += h;
            let mut minus = model.clone();
            minus.param_slices_mut()[t][i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.tensors[t][i];
            assert!(close(fd, an, 1e-4, 1e-7), "tensor {t} entry {i}: fd {fd} vs analytic {an}");
        }
    }
    for r in 0..batch.nrows() {
        for c in 0..batch.ncols() {
            let mut xp = batch.clone();
            xp[[r, c]] += h;
            let mut xm = batch.clone();
            xm[[r, c]] -= h;
            let lp = {
                let mut m = model.clone();
                (&m.forward(&xp, &mut stream_rng(seed, 0, 2)).unwrap().0 * &weights).sum()
            };
            let lm = {
                let mut m = model.clone();
                (&m.forward(&xm, &mut stream_rng(seed, 0, 2)).unwrap().0 * &weights).sum()
            };
            let fd = (lp - lm) / (2.0 * h);
            assert!(close(fd, dx[[r, c]], 1e-4, 1e-7), "input ({r},{c}): fd {fd} vs analytic {}", dx[[r, c]]);
        }
    }
}

#[test]
fn backward_matches_finite_differences_train_mode() {
    let mut rng = stream_rng(17, 0, 0);
    let mut model = Mlp::build(3, 2, &[4], 11).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    let batch = random_matrix(5, 3, 2.0, &mut rng);
    check_gradients(&model, &batch, 3);
}

#[test]
fn backward_matches_finite_differences_two_blocks() {
    let mut rng = stream_rng(18, 0, 0);
    let mut model = Mlp::build(4, 3, &[6, 5], 12).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    let batch = random_matrix(7, 4, 3.0, &mut rng);
    check_gradients(&model, &batch, 4);
}

#[test]
fn backward_matches_finite_differences_eval_mode() {
    let mut rng = stream_rng(19, 0, 0);
    let mut model = Mlp::build(3, 2, &[4], 13).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    model.set_mode(Mode::Eval);
    let batch = random_matrix(1, 3, 2.0, &mut rng);
    check_gradients(&model, &batch, 5);
}

#[test]
fn zero_output_grad_gives_zero_gradients() {
    let mut model = Mlp::build(3, 2, &[4], 1).unwrap();
    let batch = random_matrix(4, 3, 1.0, &mut stream_rng(1, 0, 0));
    let (_, cache) = model.forward(&batch, &mut stream_rng(2, 0, 0)).unwrap();
    let (grads, dx) = model.backward(&cache, &Array2::zeros((4, 2))).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
    assert!(dx.iter().all(|&v| v == 0.0));
}

#[test]
fn linear_weight_gradient_is_outer_product() {
    let mut rng = stream_rng(3, 0, 0);
    let mut model = linear_model(random_matrix(3, 2, 1.0, &mut rng), Array1::zeros(3));
    model.set_mode(Mode::Train);
    let batch = random_matrix(4, 2, 1.0, &mut rng);
    let g = random_matrix(4, 3, 1.0, &mut rng);
    let (_, cache) = model.forward(&batch, &mut rng).unwrap();
    let (grads, _) = model.backward(&cache, &g).unwrap();
    let expected = g.t().dot(&batch);
    assert_eq!(grads.tensors[0].as_slice().unwrap(), expected.as_slice().unwrap());
}

#[test]
fn stale_cache_is_rejected() {
    let mut model = Mlp::build(3, 2, &[4], 1).unwrap();
    let batch = random_matrix(4, 3, 1.0, &mut stream_rng(1, 0, 0));
    let (_, cache) = model.forward(&batch, &mut stream_rng(2, 0, 0)).unwrap();
    let grads = model.backward(&cache, &Array2::ones((4, 2))).unwrap().0;
    AdamState::new(&model, AdamConfig::default()).step(&mut model, &grads).unwrap();
    let err = model.backward(&cache, &Array2::ones((4, 2))).unwrap_err();
    assert!(matches!(err, QgtError::InvalidState(_)));

    let other = Mlp::build(3, 2, &[5], 1).unwrap();
    let (_, cache) = model.forward(&batch, &mut stream_rng(2, 0, 0)).unwrap();
    assert!(other.backward(&cache, &Array2::ones((4, 2))).is_err());
}

fn scalar_model() -> Mlp {
    linear_model(array![[0.0]], array![0.0])
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut model = scalar_model();
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let grads = GradientSet { tensors: vec![array![1.0], array![0.0]] };
    adam.step(&mut model, &grads).unwrap();
    // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    let expected = -1e-3 / (1.0 + 1e-8);
    assert_relative_eq!(model.param_slices()[0][0], expected, max_relative = 1e-12);
    assert_eq!(model.param_slices()[1][0], 0.0);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_zero_gradient_is_a_noop_step() {
    let mut model = Mlp::build(3, 2, &[4], 1).unwrap();
    let before = model.clone();
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let zeros = GradientSet { tensors: model.param_slices().iter().map(|s| Array1::zeros(s.len())).collect() };
    adam.step(&mut model, &zeros).unwrap();
    assert_eq!(model.param_slices(), before.param_slices());
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_two_steps_match_scalar_trace() {
    let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut model = scalar_model();
    let mut adam = AdamState::new(&model, cfg);
    let g = GradientSet { tensors: vec![array![0.5], array![0.0]] };
    adam.step(&mut model, &g).unwrap();
    adam.step(&mut model, &g).unwrap();

    // Hand-rolled recurrence.
    let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = 0.9 * m + 0.1 * 0.5;
        v = 0.999 * v + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        p -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
    }
    assert_relative_eq!(model.param_slices()[0][0], p, max_relative = 1e-12);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut model = scalar_model();
    let before = model.clone();
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let g = GradientSet { tensors: vec![array![f64::NAN], array![0.0]] };
    assert!(matches!(adam.step(&mut model, &g), Err(QgtError::TrainingDiverged(_))));
    assert_eq!(model.param_slices(), before.param_slices());
    assert_eq!(adam.step, 0);
}

#[test]
fn linear_jacobian_is_weight() {
    let w = random_matrix(6, 4, 1.0, &mut stream_rng(1, 0, 0));
    let model = linear_model(w.clone(), Array1::ones(6));
    for y in [array![0.0, 0.0, 0.0, 0.0], array![3.0, -1.0, 2.0, 7.0]] {
        assert_eq!(model.jacobian(y.view()).unwrap(), w);
    }
}

#[test]
fn jacobian_requires_eval_mode() {
    let model = Mlp::build(3, 2, &[4], 1).unwrap();
    let err = model.jacobian(array![1.0, 2.0, 3.0].view()).unwrap_err();
    assert!(matches!(err, QgtError::InvalidState(_)));
}

#[test]
fn jacobian_matches_finite_differences_level3() {
    let mut rng = stream_rng(23, 0, 0);
    let mut model = Mlp::build_level(8, 12, 3, 5).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    model.set_mode(Mode::Eval);
    let y = Array1::from_shape_simple_fn(8, || rng.random_range(0.0..6.0));
    let jac = model.jacobian(y.view()).unwrap();
    let h = 1e-3;
    for c in 0..8 {
        let mut yp = y.clone();
        yp[c] += h;
        let mut ym = y.clone();
        ym[c] -= h;
        let fp = model.predict(&yp.clone().insert_axis(ndarray::Axis(0))).unwrap();
        let fm = model.predict(&ym.clone().insert_axis(ndarray::Axis(0))).unwrap();
        for r in 0..12 {
            let fd = (fp[[0, r]] - fm[[0, r]]) / (2.0 * h);
            assert!(close(fd, jac[[r, c]], 1e-5, 1e-9), "({r},{c}): fd {fd} vs {}", jac[[r, c]]);
        }
    }
}

#[test]
fn jacobian_stable_under_tiny_rescale() {
    let mut rng = stream_rng(29, 0, 0);
    let mut model = Mlp::build(6, 5, &[10, 10], 9).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    model.set_mode(Mode::Eval);
    let y = Array1::from_shape_simple_fn(6, || rng.random_range(0.0..6.0));
    let scaled = &y * (1.0 + 1e-9);
    assert_eq!(model.jacobian(y.view()).unwrap().mapv(|v| (v * 1e6).round()), model
        .jacobian(scaled.view())
        .unwrap()
        .mapv(|v| (v * 1e6).round()));
}

fn random_eval_model(seed: u64, input: usize, output: usize, hidden: &[usize]) -> Mlp {
    let mut rng = stream_rng(seed, 0, 99);
    let mut model = Mlp::build(input, output, hidden, seed).unwrap();
    randomize_batchnorm(&mut model, &mut rng);
    model.set_mode(Mode::Eval);
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jacobian_rows_match_basis_backward(seed in 0u64..10_000) {
        let model = random_eval_model(seed, 5, 4, &[7, 6]);
        let mut rng = stream_rng(seed, 0, 1);
        let y = random_matrix(1, 5, 4.0, &mut rng);
        let jac = model.jacobian(y.row(0)).unwrap();
        let mut m = model.clone();
        let (_, cache) = m.forward(&y, &mut rng).unwrap();
        for j in 0..4 {
            let mut seed_grad = Array2::zeros((1, 4));
            seed_grad[[0, j]] = 1.0;
            let (_, dx) = m.backward(&cache, &seed_grad).unwrap();
            for c in 0..5 {
                prop_assert!(close(dx[[0, c]], jac[[j, c]], 1e-12, 1e-14));
            }
        }
    }

    #[test]
    fn eval_is_batch_size_independent(seed in 0u64..10_000, rows in 2usize..9) {
        let model = random_eval_model(seed, 4, 3, &[6]);
        let batch = random_matrix(rows, 4, 3.0, &mut stream_rng(seed, 0, 2));
        let together = model.predict(&batch).unwrap();
        for r in 0..rows {
            let single = model.predict(&batch.slice(ndarray::s![r..r + 1, ..]).to_owned()).unwrap();
            for c in 0..3 {
                prop_assert!(close(single[[0, c]], together[[r, c]], 1e-13, 1e-13));
            }
        }
    }

    #[test]
    fn eval_is_locally_linear(seed in 0u64..10_000) {
        let model = random_eval_model(seed, 4, 3, &[8, 8]);
        let mut rng = stream_rng(seed, 0, 3);
        let y = Array1::from_shape_simple_fn(4, || rng.random_range(0.0..5.0));
        let delta = Array1::from_shape_simple_fn(4, || rng.random_range(-1.0..1.0));
        let eps = 1e-7;
        let jac = model.jacobian(y.view()).unwrap();
        let yp = &y + &(&delta * eps);
        // Skip draws whose path crosses a kink.
        let same_region = model.jacobian(yp.view()).unwrap() == jac;
        prop_assume!(same_region);
        let f0 = model.predict(&y.clone().insert_axis(ndarray::Axis(0))).unwrap();
        let f1 = model.predict(&yp.insert_axis(ndarray::Axis(0))).unwrap();
        let predicted = jac.dot(&delta) * eps;
        for j in 0..3 {
            let actual = f1[[0, j]] - f0[[0, j]];
            prop_assert!(close(actual, predicted[j], 1e-6, 1e-10 * f0[[0, j]].abs().max(1.0)));
        }
    }
}
