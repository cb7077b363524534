//! Helpers shared by the integration tests.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spp_cascade::dataset::{generate_grid, normalize, Dataset, GridConfig};
use spp_cascade::nncore::{backprop, forward_chain, Activation, DenseLayer};
use spp_cascade::physics::DrudeParams;

/// Normalized 9-thickness × 101-wavelength molybdenum grid.
pub fn reference_grid() -> Dataset {
    let grid =
        generate_grid(&GridConfig::default(), &DrudeParams::molybdenum()).expect("grid synthesis");
    assert!(grid.exclusions.is_empty());
    normalize(&grid.dataset).expect("normalize")
}

/// Relative gradient error with a floor that keeps near-zero entries from
/// amplifying finite-difference noise.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn half_sq_loss(layers: &[&DenseLayer], x: &[f64], target: &[f64]) -> f64 {
    let (y, _) = forward_chain(layers, x).unwrap();
    0.5 * y
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

fn param_mut(layers: &mut [DenseLayer; 2], layer: usize, k: usize) -> &mut f64 {
    let l = &mut layers[layer];
    let n_w = l.weights.len();
    if k < n_w {
        &mut l.weights[k]
    } else {
        &mut l.biases[k - n_w]
    }
}

/// One randomized two-layer trial; returns the largest relative error over
/// all weights and biases, comparing backprop against central differences.
pub fn two_layer_gradient_trial(
    rng: &mut ChaCha8Rng,
    first: Activation,
    second: Activation,
    h: f64,
) -> f64 {
    let n_in = rng.random_range(1..=6);
    let n_hid = rng.random_range(1..=8);
    let n_out = rng.random_range(1..=5);
    let mut layers = [
        DenseLayer::random(n_in, n_hid, first, 1.5, rng),
        DenseLayer::random(n_hid, n_out, second, 1.5, rng),
    ];
    let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (grads, _) = backprop(&[&layers[0], &layers[1]], &x, &target).unwrap();

    let mut worst = 0.0f64;
    for (idx, g) in grads.iter().enumerate() {
        let analytic: Vec<f64> = g.weights.iter().chain(&g.biases).copied().collect();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = *param_mut(&mut layers, idx, k);
            *param_mut(&mut layers, idx, k) = orig + h;
            let up = half_sq_loss(&[&layers[0], &layers[1]], &x, &target);
            *param_mut(&mut layers, idx, k) = orig - h;
            let down = half_sq_loss(&[&layers[0], &layers[1]], &x, &target);
            *param_mut(&mut layers, idx, k) = orig;
            worst = worst.max(gradient_rel_error(a, (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// Runs `trials` randomized two-layer checks, cycling through every
/// (first, second) activation pair. Returns the worst error seen.
pub fn gradient_check(trials: usize, seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let first = Activation::ALL[t % 3];
        let second = Activation::ALL[(t / 3) % 3];
        worst = worst.max(two_layer_gradient_trial(&mut rng, first, second, h));
    }
    worst
}

/// Textbook O(N²) DFT written out with explicit angles, independent of the
/// library's own reference transform.
pub fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in x.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
                re += v * angle.cos();
                im += v * angle.sin();
            }
            Complex64::new(re, im)
        })
        .collect()
}

/// Gaussian window written from its definition: centre (N−1)/2, width σ(N−1)/2.
pub fn reference_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let s = sigma * c;
    (0..n)
        .map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp())
        .collect()
}
