//! Grid synthesis, normalization and splitting.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spp_cascade::dataset::{normalize, read_csv, split, write_csv, Column, Dataset, Sample};

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (
        400.0f64..700.0,
        30.0f64..130.0,
        300.0f64..700.0,
        1e3f64..1e6,
    )
        .prop_map(|(a, b, c, d)| Sample {
            lambda0: a,
            thickness: b,
            lambda_spp: c,
            propagation_length: d,
        })
}

fn key(s: &Sample) -> [u64; 4] {
    s.to_array().map(f64::to_bits)
}

#[test]
fn reference_grid_has_the_expected_shape() {
    let ds = common::reference_grid();
    assert_eq!(ds.len(), 909);
    let phys = ds.physical_samples();
    let mut thicknesses: Vec<f64> = phys.iter().map(|s| s.thickness).collect();
    thicknesses.sort_by(f64::total_cmp);
    thicknesses.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    assert_eq!(thicknesses.len(), 9);
    for s in &phys {
        assert!(
            s.lambda_spp > 0.0 && s.lambda_spp < s.lambda0,
            "bound mode is shorter than light"
        );
        assert!(s.propagation_length.is_finite() && s.propagation_length > 0.0);
    }
}

#[test]
fn different_seeds_give_different_splits() {
    let ds = common::reference_grid();
    let (a, _) = split(&ds, 0.8, 1).unwrap();
    let (b, _) = split(&ds, 0.8, 2).unwrap();
    assert_eq!(a.len(), 728);
    let ka: Vec<_> = a.samples.iter().map(key).collect();
    let kb: Vec<_> = b.samples.iter().map(key).collect();
    assert_ne!(ka, kb);
    let (again, _) = split(&ds, 0.8, 1).unwrap();
    assert_eq!(a.samples, again.samples);
}

#[test]
fn csv_roundtrip_restores_normalized_values() {
    let ds = common::reference_grid();
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), ds.len());
    let state = ds.normalization.unwrap();
    let renorm = back.normalized_with(state);
    for (a, b) in renorm.samples.iter().zip(&ds.samples) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(samples in prop::collection::vec(sample_strategy(), 2..120), f in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = Dataset::new(samples.clone());
        let (train, test) = split(&ds, f, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), samples.len());
        prop_assert_eq!(train.len(), ((f * samples.len() as f64) - 1e-9).ceil().max(1.0) as usize);
        let mut all: Vec<_> = train.samples.iter().chain(&test.samples).map(key).collect();
        let mut orig: Vec<_> = samples.iter().map(key).collect();
        all.sort();
        orig.sort();
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn split_ignores_input_order(samples in prop::collection::vec(sample_strategy(), 2..80), seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let (a, _) = split(&Dataset::new(samples), 0.7, seed).unwrap();
        let (b, _) = split(&Dataset::new(shuffled), 0.7, seed).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn normalization_hits_both_endpoints(samples in prop::collection::vec(sample_strategy(), 2..60)) {
        let ds = normalize(&Dataset::new(samples)).unwrap();
        for col in Column::ALL {
            let vals: Vec<f64> = ds.samples.iter().map(|s| s.to_array()[col.index()]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "{}: [{lo}, {hi}]", col.name());
        }
        let back = ds.physical_samples();
        let state = ds.normalization.unwrap();
        for (s, n) in back.iter().zip(&ds.samples) {
            prop_assert_eq!(state.normalize_sample(s).to_array().map(|v| (v * 1e9).round()), n.to_array().map(|v| (v * 1e9).round()));
        }
    }
}
