//! Backprop against central finite differences.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spp_cascade::cascade::{phase_a_update, CascadeNet, Pattern, WindowDecoding};
use spp_cascade::nncore::{backprop, gd_update, Activation, DenseLayer};

#[test]
fn every_activation_pair_matches_finite_differences() {
    let worst = common::gradient_check(100, 2024, 1e-6);
    assert!(worst <= 1e-6, "worst relative gradient error {worst:e}");
}

#[test]
fn descent_step_reduces_loss_for_small_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for act in Activation::ALL {
        let mut layer = DenseLayer::random(3, 4, act, 1.0, &mut rng);
        let x = [0.3, -0.7, 0.2];
        let target = [0.1, -0.2, 0.4, 0.0];
        let (g, e0) = backprop(&[&layer], &x, &target).unwrap();
        gd_update(&mut layer, &g[0], 1e-3).unwrap();
        let (_, e1) = backprop(&[&layer], &x, &target).unwrap();
        assert!(e1.half_squared_norm() < e0.half_squared_norm(), "{act}");
    }
}

fn stage1_loss(net: &CascadeNet, p: &Pattern) -> f64 {
    let pass = net.stage1.forward(&p.input, &net.decoding).unwrap();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    0.5 * sq(&pass.y_iva, &p.stage1_target) + 0.5 * sq(&pass.params_cache.output, &p.param_target)
}

#[test]
fn phase_a_step_follows_the_stage1_gradient() {
    // After a step with rate η, each weight moves by −η·∂L/∂w, so the change
    // divided by −η must match the finite-difference gradient.
    let net = CascadeNet::random(17, 0.8, WindowDecoding::default()).unwrap();
    let p = Pattern::new([0.4, -0.3], 0.2, -0.5, [0.3, 0.47, 0.2]);
    let eta = 1e-3;
    let mut updated = net.stage1.clone();
    let pass = net.stage1.forward(&p.input, &net.decoding).unwrap();
    phase_a_update(&mut updated, &pass, &p, eta).unwrap();
    let h = 1e-6;
    let before = net.stage1.output.weights.clone();
    for k in 0..before.len() {
        let mut plus = net.clone();
        plus.stage1.output.weights[k] += h;
        let mut minus = net.clone();
        minus.stage1.output.weights[k] -= h;
        let numeric = (stage1_loss(&plus, &p) - stage1_loss(&minus, &p)) / (2.0 * h);
        let analytic = (before[k] - updated.output.weights[k]) / eta;
        assert!(
            common::gradient_rel_error(analytic, numeric) < 1e-5,
            "IVa weight {k}: {analytic} vs {numeric}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_layer_gradients_match(seed in any::<u64>(), a in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = common::two_layer_gradient_trial(&mut rng, Activation::ALL[a], Activation::ALL[(a + 1) % 3], 1e-6);
        prop_assert!(err <= 1e-6, "relative error {err:e}");
    }
}
