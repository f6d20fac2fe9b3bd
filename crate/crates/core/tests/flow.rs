mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use stylecycle_core::encoders::gaussian_log_density;
use stylecycle_core::model::Model;
use stylecycle_core::Frames;

use common::{flow_check, gaussian, numeric_log_det, random_flow, tiny_model_config};

#[test]
fn log_det_and_inverse_match_numeric_oracle() {
    let c = flow_check(100, 3);
    assert!(c.max_log_det_error <= 1e-4, "log-det error {}", c.max_log_det_error);
    assert!(c.max_inverse_error <= 1e-6, "inverse error {}", c.max_inverse_error);
}

#[test]
fn log_q_follows_change_of_variables() {
    let model = Model::new(&tiny_model_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = model.min_frames().max(8);
    let frames = Frames::new(t, 4, gaussian(&mut rng, t * 4, 1.0)).unwrap();
    let flow = model.style.flow();
    for _ in 0..5 {
        let post = model.style.sample_style(&model.store, &frames, &mut rng).unwrap();
        let ld = numeric_log_det(|z| flow.transform(&model.store, z, &post.h).unwrap().z, &post.z0);
        let expected = gaussian_log_density(&post.z0, &post.mu, &post.delta) - ld;
        assert_abs_diff_eq!(post.log_q, expected, epsilon = 1e-6);
    }
}

/// Samples pulled back through the flow and standardised must have squared
/// norms distributed as chi-squared with `D_z` degrees of freedom.
#[test]
fn pulled_back_samples_are_chi_squared() {
    let model = Model::new(&tiny_model_config(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = model.min_frames().max(8);
    let frames = Frames::new(t, 4, gaussian(&mut rng, t * 4, 1.0)).unwrap();
    let n = 2000;
    let mut stats: Vec<f64> = (0..n)
        .map(|_| {
            let post = model.style.sample_style(&model.store, &frames, &mut rng).unwrap();
            let z0 = model.style.flow().inverse(&model.store, &post.zk, &post.h).unwrap();
            z0.iter().zip(&post.mu).zip(&post.delta).map(|((z, m), d)| ((z - m) / d).powi(2)).sum()
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let chi = ChiSquared::new(model.z_dim() as f64).unwrap();
    let ks = stats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let c = chi.cdf(*s);
            (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_round_trips(seed in 0u64..10_000, dim in 1usize..=8, steps in 0usize..=4) {
        let f = random_flow(seed, dim, steps);
        let out = f.iaf.transform(&f.store, &f.z0, &f.h).unwrap();
        prop_assert_eq!(out.log_dets.len(), steps);
        let back = f.iaf.inverse(&f.store, &out.z, &f.h).unwrap();
        for (a, b) in back.iter().zip(&f.z0) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn every_step_contracts_volume(seed in 0u64..10_000, dim in 1usize..=8) {
        // gates lie in (0, 1), so each step's log-determinant is negative
        let f = random_flow(seed, dim, 3);
        let out = f.iaf.transform(&f.store, &f.z0, &f.h).unwrap();
        prop_assert!(out.log_dets.iter().all(|l| *l < 0.0));
    }
}
