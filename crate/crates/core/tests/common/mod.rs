//! Independent numeric oracles shared by the core tests and the acceptance
//! harness: finite-difference Jacobians and gradients.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Uniform};
use stylecycle_core::adversaries::DiscriminatorConfig;
use stylecycle_core::decoder::DecoderConfig;
use stylecycle_core::encoders::EncoderConfig;
use stylecycle_core::flow::Iaf;
use stylecycle_core::model::{Model, ModelConfig};
use stylecycle_core::params::{Group, GroupMask, ParamStore};
use stylecycle_core::train::{term_gradient, SourceItem, StepConfig, TargetItem, Term};
use stylecycle_core::Frames;

pub fn gaussian(rng: &mut dyn RngCore, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect()
}

/// A flow with every parameter perturbed so gates spread over (0, 1).
pub struct RandomFlow {
    pub store: ParamStore,
    pub iaf: Iaf,
    pub h: Vec<f64>,
    pub z0: Vec<f64>,
}

pub fn random_flow(seed: u64, dim: usize, steps: usize) -> RandomFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = 3;
    let hidden = Uniform::new_inclusive(dim.max(2), 16).unwrap().sample(&mut rng);
    let mut store = ParamStore::new();
    let iaf = Iaf::new(&mut store, "flow", dim, ctx, hidden, steps, Group::StyleEncoder, &mut rng);
    let noise = Uniform::new(-0.8, 0.8).unwrap();
    for v in store.data_mut() {
        *v += noise.sample(&mut rng);
    }
    let h = gaussian(&mut rng, ctx, 1.0);
    let z0 = gaussian(&mut rng, dim, 1.5);
    RandomFlow { store, iaf, h, z0 }
}

/// `ln |det J|` of `f` at `z0`, from a central-difference Jacobian.
pub fn numeric_log_det(f: impl Fn(&[f64]) -> Vec<f64>, z0: &[f64]) -> f64 {
    let d = z0.len();
    let step = 1e-5;
    let mut jac = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut plus = z0.to_vec();
        let mut minus = z0.to_vec();
        plus[j] += step;
        minus[j] -= step;
        let (a, b) = (f(&plus), f(&minus));
        for i in 0..d {
            jac[(i, j)] = (a[i] - b[i]) / (2.0 * step);
        }
    }
    jac.determinant().abs().ln()
}

pub struct FlowCheck {
    pub instances: usize,
    pub max_log_det_error: f64,
    pub max_inverse_error: f64,
}

/// Analytic log-determinants and inverses against the numeric oracle over
/// `n` random flows with `D_z <= 8` and `K <= 4`.
pub fn flow_check(n: usize, seed: u64) -> FlowCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ld_err, mut inv_err) = (0.0f64, 0.0f64);
    for i in 0..n {
        let dim = 1 + (rng.next_u32() % 8) as usize;
        let steps = (rng.next_u32() % 5) as usize;
        let f = random_flow(seed.wrapping_mul(1000) + i as u64, dim, steps);
        let out = f.iaf.transform(&f.store, &f.z0, &f.h).unwrap();
        let analytic: f64 = out.log_dets.iter().sum();
        ld_err = ld_err.max((analytic - numeric_log_det(|z| f.iaf.transform(&f.store, z, &f.h).unwrap().z, &f.z0)).abs());
        let back = f.iaf.inverse(&f.store, &out.z, &f.h).unwrap();
        inv_err = inv_err.max(back.iter().zip(&f.z0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    FlowCheck { instances: n, max_log_det_error: ld_err, max_inverse_error: inv_err }
}

pub fn tiny_model_config() -> ModelConfig {
    let encoder = EncoderConfig {
        frame_dim: 4,
        z_dim: 2,
        r_dim: 3,
        h_dim: 2,
        conv_layers: 2,
        conv_base_channels: 2,
        gru_units: 3,
        flow_steps: 2,
        flow_hidden: 4,
        speaker_layers: 1,
        speaker_units: 3,
        center_reference_input: true,
        center_speaker_input: true,
    };
    let decoder = DecoderConfig {
        vocab_size: 5,
        frame_dim: 4,
        cond_dim: 5,
        embed_dim: 3,
        text_units: 3,
        decoder_units: 4,
        attention_dim: 3,
        per_step_conditioning: false,
        speaker_projection: 3,
    };
    ModelConfig { encoder, decoder, discriminator: DiscriminatorConfig { frame_dim: 4, channels: vec![2, 2], center_input: true } }
}

/// Tiny model with perturbed parameters plus fixed batches and noise.
pub struct TinyProblem {
    pub model: Model,
    pub source: Vec<(Vec<usize>, Frames, f64)>,
    pub target: Vec<(Vec<usize>, Frames)>,
    pub z_star: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
}

impl TinyProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_model_config();
        let mut model = Model::new(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        // move away from the zero-initialised output layers
        let noise = gaussian(&mut rng, model.store.len(), 0.3);
        for (v, n) in model.store.data_mut().iter_mut().zip(noise) {
            *v += n;
        }
        let t = model.min_frames().max(6);
        let mut utt = |n_frames: usize| {
            let frames = Frames::new(n_frames, 4, gaussian(&mut rng, n_frames * 4, 0.7)).unwrap();
            let tokens: Vec<usize> = (0..3).map(|_| (rng.next_u32() % 5) as usize).collect();
            (tokens, frames)
        };
        let source = vec![(utt(t), 0.3), (utt(t + 1), 0.8)]
            .into_iter()
            .map(|((tk, f), p)| (tk, f, p))
            .collect();
        let target = vec![utt(t), utt(t + 2)];
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5e);
        let z_star = gaussian(&mut rng2, 2, 0.5);
        let eps = (0..2).map(|_| gaussian(&mut rng2, 2, 1.0)).collect();
        Self { model, source, target, z_star, eps }
    }

    pub fn value_and_gradient(&self, model: &Model, cfg: &StepConfig, term: Term) -> (f64, Vec<f64>) {
        let source: Vec<SourceItem<'_>> =
            self.source.iter().map(|(t, f, p)| SourceItem { tokens: t, frames: f, p_style: *p }).collect();
        let target: Vec<TargetItem<'_>> = self.target.iter().map(|(t, f)| TargetItem { tokens: t, frames: f }).collect();
        let (v, g) = term_gradient(model, cfg, &source, &target, &self.z_star, &self.eps, term).unwrap();
        (v, g.data().to_vec())
    }
}

pub fn term_mask(term: Term) -> GroupMask {
    if term == Term::AdvD {
        GroupMask::DISCRIMINATOR
    } else {
        GroupMask::GENERATOR
    }
}

pub struct GradientCheck {
    pub term: Term,
    pub coordinates: usize,
    pub passed: usize,
    pub worst_relative: f64,
    pub value: f64,
}

impl GradientCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.coordinates.max(1) as f64
    }
}

/// Relative agreement `|a - n| <= rel · max(|a|, |n|)`, with coordinates
/// where both are below `floor` counted as agreeing.
pub fn agrees(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    scale < floor || (analytic - numeric).abs() <= rel * scale
}

/// Backpropagated gradient of `term` against central differences over every
/// coordinate of the groups that term trains.
pub fn gradient_check(p: &TinyProblem, cfg: &StepConfig, term: Term, rel: f64, floor: f64) -> GradientCheck {
    let (value, analytic) = p.value_and_gradient(&p.model, cfg, term);
    let mask = term_mask(term);
    let mut model = p.model.clone();
    let coords: Vec<usize> = model
        .store
        .entries()
        .iter()
        .filter(|e| mask.contains(e.group))
        .flat_map(|e| e.offset..e.offset + e.len)
        .collect();
    let (mut passed, mut worst) = (0, 0.0f64);
    for &i in &coords {
        let x = model.store.data()[i];
        let step = 1e-6 * x.abs().max(1.0);
        model.store.data_mut()[i] = x + step;
        let up = p.value_and_gradient(&model, cfg, term).0;
        model.store.data_mut()[i] = x - step;
        let down = p.value_and_gradient(&model, cfg, term).0;
        model.store.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * step);
        if agrees(analytic[i], numeric, rel, floor) {
            passed += 1;
        }
        let scale = analytic[i].abs().max(numeric.abs());
        if scale >= floor {
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    GradientCheck { term, coordinates: coords.len(), passed, worst_relative: worst, value }
}
