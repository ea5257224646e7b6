//! Sampling statistics of the generator against closed-form moments, and the
//! forward map against a bitmask count over every signal for small `N`.

use std::sync::Arc;

use ndarray::Array1;
use qgt_core::generate::{
    gen_noise, gen_pooling_matrix, gen_signal, gen_split, measure, pooling_for, stream_rng, BinarySignal, GenConfig,
    NoiseVector, Split,
};

/// `|observed - mean| <= 3 sigma` for the mean of `draws` i.i.d. samples with variance `var`.
fn within_3_sigma(observed: f64, mean: f64, var: f64, draws: usize) -> bool {
    (observed - mean).abs() <= 3.0 * (var / draws as f64).sqrt()
}

#[test]
fn pooling_entries_are_fair_coins() {
    let a = gen_pooling_matrix(200, 500, &mut stream_rng(101, 0, 0)).unwrap();
    let ones = a.entries().iter().filter(|&&v| v == 1).count();
    let draws = a.entries().len();
    assert!(within_3_sigma(ones as f64 / draws as f64, 0.5, 0.25, draws));
    assert!(a.entries().iter().all(|&v| v <= 1));
}

#[test]
fn signal_support_matches_k() {
    let (n, k, trials) = (100, 6.0, 20_000);
    let mut rng = stream_rng(102, 1, 0);
    let p = k / n as f64;
    let mut total = 0usize;
    let mut per_item = vec![0usize; n];
    for _ in 0..trials {
        let x = gen_signal(n, k, &mut rng).unwrap();
        total += x.support_size();
        for (c, &v) in per_item.iter_mut().zip(x.values.iter()) {
            *c += usize::from(v);
        }
    }
    // Support size is Binomial(N, p).
    assert!(within_3_sigma(total as f64 / trials as f64, k, n as f64 * p * (1.0 - p), trials));
    // Pooled over items, each coordinate is Bernoulli(p).
    let mean_rate = per_item.iter().sum::<usize>() as f64 / (n * trials) as f64;
    assert!(within_3_sigma(mean_rate, p, p * (1.0 - p), n * trials));
}

#[test]
fn noise_rate_and_levels() {
    let (m, s, n, d, trials) = (35, 10.0, 100, 2, 20_000);
    let mut rng = stream_rng(103, 1, 0);
    let p = s / n as f64;
    let levels = (2 * d + 1) as usize;
    let mut counts = vec![0usize; levels];
    let mut nonzero = 0usize;
    let mut sum = 0i64;
    for _ in 0..trials {
        let eta = gen_noise(m, s, n, d, &mut rng).unwrap();
        for &v in &eta.values {
            assert!(v.abs() <= d);
            nonzero += usize::from(v != 0);
            sum += i64::from(v);
            if v != 0 {
                counts[(v + d) as usize] += 1;
            }
        }
    }
    let draws = m * trials;
    // Non-zero with probability p * 2D / (2D + 1).
    let q = p * (2 * d) as f64 / levels as f64;
    assert!(within_3_sigma(nonzero as f64 / draws as f64, q, q * (1.0 - q), draws));
    // Mean 0, variance p * D (D + 1) / 3.
    let var = p * f64::from(d * (d + 1)) / 3.0;
    assert!(within_3_sigma(sum as f64 / draws as f64, 0.0, var, draws));
    // Each non-zero level has probability p / (2D + 1).
    let r = p / levels as f64;
    for (i, &c) in counts.iter().enumerate() {
        if i as i32 != d {
            assert!(within_3_sigma(c as f64 / draws as f64, r, r * (1.0 - r), draws), "level {}", i as i32 - d);
        }
    }
}

#[test]
fn split_residuals_follow_the_noise_law() {
    let cfg = GenConfig { n: 100, m: 35, k: 6.0, s: 10.0, d: 1, seed: 104 };
    let pooling = Arc::new(pooling_for(&cfg).unwrap());
    let ds = gen_split(&cfg, pooling, Split::Train, 4000).unwrap();
    let residual = &ds.measurements - &ds.noiseless_measurements();
    let draws = residual.len();
    let q = 0.1 * 2.0 / 3.0;
    let nonzero = residual.iter().filter(|&&v| v != 0).count();
    assert!(within_3_sigma(nonzero as f64 / draws as f64, q, q * (1.0 - q), draws));
    assert!(residual.iter().all(|v| v.abs() <= 1));
}

/// `popcount(row_mask & x_mask) + eta` per test.
fn bitmask_oracle(rows: &[u32], x: u32, eta: &[i32]) -> Vec<i32> {
    rows.iter().zip(eta).map(|(&r, &e)| (r & x).count_ones() as i32 + e).collect()
}

#[test]
fn measure_matches_bitmask_oracle_for_every_signal() {
    let m = 6;
    for n in 1..=10usize {
        let a = gen_pooling_matrix(m, n, &mut stream_rng(200 + n as u64, 0, 0)).unwrap();
        let rows: Vec<u32> = a
            .entries()
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold(0u32, |acc, (j, &v)| acc | (u32::from(v) << j)))
            .collect();
        let mut rng = stream_rng(300 + n as u64, 0, 0);
        for mask in 0u32..(1 << n) {
            let x = BinarySignal {
                values: Array1::from_shape_fn(n, |j| ((mask >> j) & 1) as u8),
                expected_sparsity: 1.0,
            };
            let noise: NoiseVector = gen_noise(m, n as f64 / 2.0, n, 3, &mut rng).unwrap();
            let y = measure(&a, &x, &noise).unwrap();
            assert_eq!(y.values.to_vec(), bitmask_oracle(&rows, mask, noise.values.as_slice().unwrap()), "n={n} x={mask:b}");
        }
    }
}
