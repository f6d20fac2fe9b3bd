use approx::assert_relative_eq;
use proptest::prelude::*;
use stylecycle_core::objectives::{adversarial_d, style_distortion, total_loss, weighted_total, LossWeights};

#[test]
fn default_weight_example_is_exact() {
    let b = total_loss(&LossWeights::default(), 2.0, 0.3, 1.0, 0.1, 2.0).unwrap();
    assert_eq!(b.total, 5.5);
}

#[test]
fn constant_half_discriminator() {
    let v = adversarial_d(&[0.5; 4], &[0.5; 4]);
    assert_relative_eq!(v, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn total_is_linear_in_each_term(
        w in prop::array::uniform4(0.0f64..10.0),
        l in prop::array::uniform4(0.0f64..100.0),
        k in -5.0f64..5.0,
    ) {
        let weights = LossWeights { alpha: w[0], beta: w[1], gamma: w[2], lambda: w[3] };
        let base = weighted_total(&weights, l[0], l[1], l[2], l[3]);
        let shifted = weighted_total(&weights, l[0] + k, l[1], l[2] + k, l[3]);
        prop_assert!((shifted - base - k * (w[0] + w[2])).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn distortion_is_monotone(p in 0.0f64..1.0, dp in 0.0f64..0.5, d in 0.1f64..5.0, dd in 0.01f64..2.0) {
        let zs = [0.0];
        let (z, z2) = ([d], [d + dd]);
        let a = style_distortion([(p, &z[..])], &zs);
        let b = style_distortion([((p + dp).min(1.0), &z[..])], &zs);
        let c = style_distortion([(p, &z2[..])], &zs);
        prop_assert!(b >= a);
        if p > 0.0 {
            prop_assert!(c > a);
        }
    }
}
