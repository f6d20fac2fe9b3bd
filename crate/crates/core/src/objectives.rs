//! Loss terms and their weighted combination.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::adversaries::clamp_probability;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 5.0, lambda: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("weight {name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_dis: f64,
    pub l_cyc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_rec", self.l_rec),
            ("l_adv_d", self.l_adv_d),
            ("l_adv_g", self.l_adv_g),
            ("l_dis", self.l_dis),
            ("l_cyc", self.l_cyc),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Generator-view total. A zero weight drops its term entirely, so the total
/// does not depend on it even when the term is non-finite.
pub fn weighted_total(w: &LossWeights, l_rec: f64, l_adv_g: f64, l_dis: f64, l_cyc: f64) -> f64 {
    let mut total = 0.0;
    for (wt, l) in [(w.alpha, l_rec), (w.beta, l_adv_g), (w.gamma, l_dis), (w.lambda, l_cyc)] {
        if wt != 0.0 {
            total += wt * l;
        }
    }
    total
}

pub fn total_loss(w: &LossWeights, l_rec: f64, l_adv_d: f64, l_adv_g: f64, l_dis: f64, l_cyc: f64) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown { l_rec, l_adv_d, l_adv_g, l_dis, l_cyc, total: weighted_total(w, l_rec, l_adv_g, l_dis, l_cyc), weights: *w })
}

/// Discriminator objective from probabilities on transfers (`fake`) and on
/// target reconstructions (`real`).
pub fn adversarial_d(fake: &[f64], real: &[f64]) -> f64 {
    mean(fake.iter().map(|&p| -libm::log(1.0 - clamp_probability(p))))
        + mean(real.iter().map(|&p| -libm::log(clamp_probability(p))))
}

/// Non-saturating generator objective on transfer probabilities.
pub fn adversarial_g(fake: &[f64]) -> f64 {
    mean(fake.iter().map(|&p| -libm::log(clamp_probability(p))))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch mean of `p_i · ‖z_i − z*‖²`.
pub fn style_distortion<'a>(items: impl IntoIterator<Item = (f64, &'a [f64])>, z_star: &[f64]) -> f64 {
    mean(items.into_iter().map(|(p, z)| p * squared_distance(z, z_star)))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `p · ‖z − z*‖²` for one item; `z*` enters as a constant.
pub fn style_distortion_tape(tape: &mut Tape, z: Var, z_star: &[f64], p: f64) -> Var {
    let target = tape.vector(z_star.to_vec());
    let d = tape.sub(z, target);
    let d2 = tape.mul(d, d);
    let s = tape.sum(d2);
    tape.scale(s, p)
}

/// `−ln D` for a clamped probability node.
pub fn neg_log_tape(tape: &mut Tape, p: Var) -> Var {
    let l = tape.ln(p);
    tape.scale(l, -1.0)
}

/// `−ln(1 − D)` for a clamped probability node.
pub fn neg_log_complement_tape(tape: &mut Tape, p: Var) -> Var {
    let q = tape.one_minus(p);
    let l = tape.ln(q);
    tape.scale(l, -1.0)
}

/// KL of a diagonal Gaussian posterior to the standard normal, used by the
/// optional prior term.
pub fn kl_standard_normal_tape(tape: &mut Tape, mu: Var, delta: Var) -> Var {
    // ½ Σ (μ² + δ² − 1) − Σ ln δ
    let mu2 = tape.mul(mu, mu);
    let d2 = tape.mul(delta, delta);
    let a = tape.add(mu2, d2);
    let n = tape.shape(mu)[0] as f64;
    let sa = tape.sum(a);
    let half = tape.affine(sa, 0.5, -0.5 * n);
    let ld = tape.ln(delta);
    let sld = tape.sum(ld);
    tape.sub(half, sld)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_example() {
        let b = total_loss(&LossWeights::default(), 2.0, 0.0, 1.0, 0.1, 2.0).unwrap();
        assert_eq!(b.total, 5.5);
        let z = total_loss(&LossWeights::default(), 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { gamma: -1.0, ..Default::default() };
        assert!(matches!(total_loss(&w, 1.0, 1.0, 1.0, 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_drops_term() {
        let w = LossWeights { gamma: 0.0, ..Default::default() };
        let a = weighted_total(&w, 1.0, 2.0, 3.0, 4.0);
        let b = weighted_total(&w, 1.0, 2.0, 1e9, 4.0);
        let c = weighted_total(&w, 1.0, 2.0, f64::NAN, 4.0);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn distortion_examples() {
        let z_star = [0.0];
        let z1 = [2.0];
        let z2 = [1.0];
        let v = style_distortion([(0.2, &z1[..]), (0.8, &z2[..])], &z_star);
        assert_eq!(v, 0.8);
        assert_eq!(style_distortion([(0.0, &z1[..]), (0.0, &z2[..])], &z_star), 0.0);
        assert_eq!(style_distortion([(0.7, &z_star[..])], &z_star), 0.0);
    }

    #[test]
    fn adversarial_examples() {
        let half = [0.5, 0.5, 0.5];
        assert!((adversarial_d(&half, &half) - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((adversarial_g(&half) - core::f64::consts::LN_2).abs() < 1e-12);
        // perfect discriminator saturates at the clamp
        let d = adversarial_d(&[0.0], &[1.0]);
        assert!(d < 3e-7 && d > 0.0);
        assert!((adversarial_g(&[0.0]) - 16.118095650958319).abs() < 1e-9);
    }

    #[test]
    fn kl_is_zero_at_prior() {
        let mut t = Tape::new();
        let mu = t.input(alloc::vec![0.0; 3], [3, 1, 1]);
        let d = t.input(alloc::vec![1.0; 3], [3, 1, 1]);
        let kl = kl_standard_normal_tape(&mut t, mu, d);
        assert!(t.scalar(kl).abs() < 1e-15);
    }
}
