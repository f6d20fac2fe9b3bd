//! Independent evaluation probes trained only on ground-truth frames.
//!
//! The style probe reads the utterance's energy contour (per-frame mean over
//! the frame dimension, time-mean removed, averaged into fixed bins) which is
//! blind to the speaker envelope. The speaker probe reads the time-averaged
//! spectrum with its frequency-mean removed, which is blind to the contour.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adversaries::shuffle;
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::params::{Adam, Gradients, Group, GroupMask, Init, ParamStore};
use crate::tape::Tape;

pub const STYLE_BINS: usize = 8;

/// Mean-removed energy contour averaged into `STYLE_BINS` equal bins.
pub fn style_features(frames: &Frames) -> Vec<f64> {
    let n = frames.num_frames();
    let energy: Vec<f64> = frames.rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let m = energy.iter().sum::<f64>() / n as f64;
    (0..STYLE_BINS)
        .map(|b| {
            // bin b covers [b·n/B, (b+1)·n/B); short inputs reuse the nearest frame
            let lo = b * n / STYLE_BINS;
            let hi = ((b + 1) * n / STYLE_BINS).max(lo + 1).min(n);
            let lo = lo.min(hi - 1);
            energy[lo..hi].iter().sum::<f64>() / (hi - lo) as f64 - m
        })
        .collect()
}

/// Time-averaged spectrum with its mean over frequency removed.
pub fn speaker_features(frames: &Frames) -> Vec<f64> {
    let n = frames.num_frames() as f64;
    let mut avg = vec![0.0; frames.dim()];
    for r in frames.rows() {
        avg.iter_mut().zip(r).for_each(|(a, x)| *a += x / n);
    }
    let m = avg.iter().sum::<f64>() / avg.len() as f64;
    avg.iter_mut().for_each(|a| *a -= m);
    avg
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for x in xs {
            var.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
        }
        let scale = var.iter().map(|v| 1.0 / libm::sqrt(v + 1e-8)).collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub embed_dim: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 400, learning_rate: 0.05, l2: 1e-3, embed_dim: 16, temperature: 0.1, seed: 5 }
    }
}

/// Multinomial logistic regression over style contours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleProbe {
    pub num_classes: usize,
    norm: Standardizer,
    /// `[classes, features]` row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    z.iter_mut().for_each(|v| {
        *v = libm::exp(*v - m);
        s += *v;
    });
    z.iter_mut().for_each(|v| *v /= s);
}

impl StyleProbe {
    /// Full-batch gradient descent with Adam-style moments on the
    /// cross-entropy plus an L2 penalty.
    pub fn train(examples: &[(Vec<f64>, usize)], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Data("style probe needs at least two classes".into()));
        }
        let mut present = vec![false; num_classes];
        for (_, y) in examples {
            if *y >= num_classes {
                return Err(Error::Data("style label out of range".into()));
            }
            present[*y] = true;
        }
        if present.iter().filter(|p| **p).count() < 2 {
            return Err(Error::Data("style probe training data has a single class".into()));
        }
        let xs: Vec<Vec<f64>> = examples.iter().map(|(x, _)| x.clone()).collect();
        let norm = Standardizer::fit(&xs);
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| norm.apply(x)).collect();
        let d = xs[0].len();
        let mut params = vec![0.0; num_classes * (d + 1)];
        let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
        let n = xs.len() as f64;
        for it in 1..=cfg.iterations {
            let mut g = vec![0.0; params.len()];
            for (x, (_, y)) in xs.iter().zip(examples) {
                let mut z: Vec<f64> = (0..num_classes)
                    .map(|c| params[num_classes * d + c] + (0..d).map(|j| params[c * d + j] * x[j]).sum::<f64>())
                    .collect();
                softmax_in_place(&mut z);
                for c in 0..num_classes {
                    let r = (z[c] - if c == *y { 1.0 } else { 0.0 }) / n;
                    for j in 0..d {
                        g[c * d + j] += r * x[j];
                    }
                    g[num_classes * d + c] += r;
                }
            }
            for i in 0..num_classes * d {
                g[i] += cfg.l2 * params[i];
            }
            let (b1, b2) = (0.9, 0.999);
            let (c1, c2) = (1.0 - libm::pow(b1, it as f64), 1.0 - libm::pow(b2, it as f64));
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                params[i] -= cfg.learning_rate * (m[i] / c1) / (libm::sqrt(v[i] / c2) + 1e-8);
            }
        }
        let bias = params.split_off(num_classes * d);
        Ok(Self { num_classes, norm, weights: params, bias })
    }

    pub fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        let x = self.norm.apply(features);
        let d = x.len();
        let mut z: Vec<f64> = (0..self.num_classes)
            .map(|c| self.bias[c] + (0..d).map(|j| self.weights[c * d + j] * x[j]).sum::<f64>())
            .collect();
        softmax_in_place(&mut z);
        z
    }

    pub fn predict(&self, frames: &Frames) -> usize {
        let p = self.probabilities(&style_features(frames));
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    pub fn accuracy(&self, examples: &[(&Frames, usize)]) -> f64 {
        let hits = examples.iter().filter(|(f, y)| self.predict(f) == *y).count();
        hits as f64 / examples.len().max(1) as f64
    }
}

/// Linear embedding of speaker features trained with an in-batch
/// contrastive loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProbe {
    norm: Standardizer,
    embed_dim: usize,
    /// `[embed_dim, features]` row-major.
    weights: Vec<f64>,
}

impl SpeakerProbe {
    /// `groups[k]` holds the feature vectors of speaker `k`. Each iteration
    /// draws an anchor and a positive per speaker; the other speakers'
    /// positives are the negatives.
    pub fn train(groups: &[Vec<Vec<f64>>], cfg: &ProbeConfig) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::Data("speaker probe needs at least two speakers".into()));
        }
        if groups.iter().any(|g| g.len() < 2) {
            return Err(Error::Data("speaker probe needs two utterances per speaker".into()));
        }
        let all: Vec<Vec<f64>> = groups.iter().flatten().cloned().collect();
        let norm = Standardizer::fit(&all);
        let groups: Vec<Vec<Vec<f64>>> = groups.iter().map(|g| g.iter().map(|x| norm.apply(x)).collect()).collect();
        let d = all[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let w = store.add("probe.w", [cfg.embed_dim, d, 1], Group::Probe, Init::Glorot, &mut rng);
        let mut opt = Adam::new(&store, cfg.learning_rate * 0.2);
        let k = groups.len();
        let mut orders: Vec<Vec<usize>> = groups.iter().map(|g| (0..g.len()).collect()).collect();
        for _ in 0..cfg.iterations {
            let mut pairs = Vec::with_capacity(k);
            for (o, _) in orders.iter_mut().zip(&groups) {
                shuffle(o, &mut rng);
                pairs.push((o[0], o[1]));
            }
            let mut tape = Tape::new();
            let emb = |tape: &mut Tape, x: &[f64]| {
                let v = tape.vector(x.to_vec());
                let e = tape.linear(&store, w, None, v);
                tape.l2_normalize(e)
            };
            let anchors: Vec<_> = (0..k).map(|s| emb(&mut tape, &groups[s][pairs[s].0])).collect();
            let positives: Vec<_> = (0..k).map(|s| emb(&mut tape, &groups[s][pairs[s].1])).collect();
            let p = tape.stack_rows(&positives);
            let mut loss = None;
            for (s, a) in anchors.iter().enumerate() {
                let logits = tape.matvec(p, *a);
                let logits = tape.scale(logits, 1.0 / cfg.temperature);
                let probs = tape.softmax(logits);
                let pick = tape.slice(probs, s, 1);
                let l = tape.ln(pick);
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
            }
            let loss = loss.expect("at least two speakers");
            let mut g = Gradients::zeros_like(&store);
            tape.backward(loss, -1.0 / k as f64, &store, &mut g, GroupMask::PROBE);
            opt.update(&mut store, &g, GroupMask::PROBE);
        }
        Ok(Self { norm, embed_dim: cfg.embed_dim, weights: store.values(w).to_vec() })
    }

    /// Unit-norm probe embedding.
    pub fn embed(&self, frames: &Frames) -> Vec<f64> {
        let x = self.norm.apply(&speaker_features(frames));
        let d = x.len();
        let mut e: Vec<f64> = (0..self.embed_dim).map(|i| (0..d).map(|j| self.weights[i * d + j] * x[j]).sum()).collect();
        let n = libm::sqrt(e.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        e.iter_mut().for_each(|v| *v /= n);
        e
    }

    /// Nearest-centroid accuracy of `examples` against centroids built from
    /// `reference[k]`.
    pub fn centroid_accuracy(&self, reference: &[Vec<&Frames>], examples: &[(&Frames, usize)]) -> f64 {
        let centroids: Vec<Vec<f64>> = reference
            .iter()
            .map(|fs| {
                let mut c = vec![0.0; self.embed_dim];
                for f in fs {
                    c.iter_mut().zip(self.embed(f)).for_each(|(a, b)| *a += b);
                }
                c
            })
            .collect();
        let hits = examples
            .iter()
            .filter(|(f, y)| {
                let e = self.embed(f);
                let best = (0..centroids.len())
                    .map(|k| cosine(&e, &centroids[k]))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, c)| if c > b.1 { (k, c) } else { b });
                best.0 == *y
            })
            .count();
        hits as f64 / examples.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0, 1.0], &[0.3, -2.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn style_features_ignore_constant_offsets() {
        let f = Frames::new(10, 3, (0..30).map(|i| (i / 3) as f64 * 0.1 + (i % 3) as f64).collect()).unwrap();
        let shifted = Frames::new(10, 3, f.as_slice().iter().map(|v| v + 4.0).collect()).unwrap();
        for (a, b) in style_features(&f).iter().zip(style_features(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = style_features(&f);
        assert!(s[0] < s[STYLE_BINS - 1]);
    }

    #[test]
    fn single_class_rejected() {
        let ex = alloc::vec![(alloc::vec![1.0, 2.0], 0usize), (alloc::vec![2.0, 1.0], 0)];
        assert!(matches!(StyleProbe::train(&ex, 3, &ProbeConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn style_probe_separates_linear_classes() {
        let ex: Vec<(Vec<f64>, usize)> =
            (0..40).map(|i| (alloc::vec![i as f64 % 2.0 * 3.0 + (i as f64) * 0.01, 1.0], i % 2)).collect();
        let p = StyleProbe::train(&ex, 2, &ProbeConfig::default()).unwrap();
        let again = StyleProbe::train(&ex, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(p, again);
        for (x, y) in &ex {
            let pr = p.probabilities(x);
            assert!(pr[*y] > 0.5);
        }
    }
}
