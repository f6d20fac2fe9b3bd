//! Style posterior (reference encoder + IAF) and speaker embedding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Iaf;
use crate::frames::Frames;
use crate::nn::{ConvStack, Dense, GruCell, LstmCell};
use crate::params::{Group, ParamStore};
use crate::tape::{Tape, Var};

/// Floor added after the softplus that produces `delta`.
pub const DELTA_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub frame_dim: usize,
    pub z_dim: usize,
    pub r_dim: usize,
    pub h_dim: usize,
    pub conv_layers: usize,
    /// Channels of the first conv layer; doubled every second layer.
    pub conv_base_channels: usize,
    pub gru_units: usize,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub speaker_layers: usize,
    pub speaker_units: usize,
    /// Subtract each frequency bin's time mean before the reference encoder,
    /// hiding static spectral offsets from it.
    pub center_reference_input: bool,
    /// Subtract each frame's mean over frequency before the speaker encoder,
    /// hiding per-frame level changes from it.
    pub center_speaker_input: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frame_dim: 32,
            z_dim: 8,
            r_dim: 16,
            h_dim: 16,
            conv_layers: 6,
            conv_base_channels: 8,
            gru_units: 32,
            flow_steps: 4,
            flow_hidden: 16,
            speaker_layers: 3,
            speaker_units: 24,
            center_reference_input: true,
            center_speaker_input: true,
        }
    }
}

impl EncoderConfig {
    pub fn conv_channels(&self) -> Vec<usize> {
        (0..self.conv_layers).map(|i| self.conv_base_channels << (i / 2)).collect()
    }

    /// Stride 2 on alternating layers, starting with the first.
    pub fn conv_strides(&self) -> Vec<usize> {
        (0..self.conv_layers).map(|i| if i % 2 == 0 { 2 } else { 1 }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_dim", self.frame_dim),
            ("z_dim", self.z_dim),
            ("r_dim", self.r_dim),
            ("h_dim", self.h_dim),
            ("conv_layers", self.conv_layers),
            ("conv_base_channels", self.conv_base_channels),
            ("gru_units", self.gru_units),
            ("flow_hidden", self.flow_hidden),
            ("speaker_layers", self.speaker_layers),
            ("speaker_units", self.speaker_units),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        let halvings = self.conv_strides().iter().filter(|s| **s == 2).count() as u32;
        if 1usize << halvings > self.frame_dim {
            return Err(Error::Config(format!(
                "{} stride-2 layers exceed log2 of frame_dim {}",
                halvings, self.frame_dim
            )));
        }
        Ok(())
    }
}

/// Conv stack over the `T × F` plane followed by a unidirectional GRU whose
/// final state summarises the utterance.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    conv: ConvStack,
    gru: GruCell,
    frame_dim: usize,
    center: bool,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, group: Group, rng: &mut dyn RngCore) -> Self {
        let conv = ConvStack::new(store, &format!("{name}.conv"), &cfg.conv_channels(), &cfg.conv_strides(), group, rng);
        let width = conv.out_channels() * conv.out_extent(cfg.frame_dim);
        let gru = GruCell::new(store, &format!("{name}.gru"), width, cfg.gru_units, group, rng);
        Self { conv, gru, frame_dim: cfg.frame_dim, center: cfg.center_reference_input }
    }

    pub fn min_frames(&self) -> usize {
        self.conv.min_extent()
    }

    pub fn output_dim(&self) -> usize {
        self.gru.hidden
    }

    /// Validates and places `frames` on the tape as a `[T, F]` matrix.
    pub fn input(&self, tape: &mut Tape, frames: &Frames) -> Result<Var> {
        if frames.dim() != self.frame_dim {
            return Err(Error::Shape(format!("frame dim {} vs encoder {}", frames.dim(), self.frame_dim)));
        }
        Ok(tape.input(frames.as_slice().to_vec(), [frames.num_frames(), frames.dim(), 1]))
    }

    /// Encodes a `[T, F]` matrix node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let [t, f, _] = tape.shape(frames);
        if f != self.frame_dim {
            return Err(Error::Shape(format!("frame dim {} vs encoder {}", f, self.frame_dim)));
        }
        if t < self.min_frames() {
            return Err(Error::TooShort { got: t, min: self.min_frames() });
        }
        let frames = if self.center { center_over_time(tape, frames) } else { frames };
        let plane = tape.reshape(frames, [1, t, f]);
        let maps = self.conv.forward(tape, store, plane);
        let seq = tape.conv_to_seq(maps);
        let states = self.gru.run(tape, store, seq, false);
        Ok(*states.last().expect("non-empty sequence"))
    }
}

/// Variational style posterior with its flow trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePosterior {
    pub mu: Vec<f64>,
    /// Standard deviations, strictly positive.
    pub delta: Vec<f64>,
    pub h: Vec<f64>,
    pub z0: Vec<f64>,
    pub zk: Vec<f64>,
    pub log_dets: Vec<f64>,
    pub log_q: f64,
}

/// Tape handles for a sampled style posterior.
#[derive(Debug, Clone)]
pub struct PosteriorVars {
    pub mu: Var,
    pub delta: Var,
    pub h: Var,
    pub z0: Var,
    pub zk: Var,
    pub log_dets: Vec<Var>,
    pub log_q: Var,
}

impl PosteriorVars {
    pub fn to_values(&self, tape: &Tape) -> StylePosterior {
        StylePosterior {
            mu: tape.value(self.mu).to_vec(),
            delta: tape.value(self.delta).to_vec(),
            h: tape.value(self.h).to_vec(),
            z0: tape.value(self.z0).to_vec(),
            zk: tape.value(self.zk).to_vec(),
            log_dets: self.log_dets.iter().map(|v| tape.scalar(*v)).collect(),
            log_q: tape.scalar(self.log_q),
        }
    }
}

/// Diagonal-Gaussian log-density of `z` under `N(mu, delta²)`.
pub fn gaussian_log_density(z: &[f64], mu: &[f64], delta: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(delta)
        .map(|((z, m), d)| {
            let e = (z - m) / d;
            -0.5 * LN_2PI - libm::log(*d) - 0.5 * e * e
        })
        .sum()
}

/// Reference encoder, posterior heads and IAF.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    reference: ReferenceEncoder,
    mu_head: Dense,
    delta_head: Dense,
    ctx_head: Dense,
    flow: Iaf,
    z_dim: usize,
}

impl StyleEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut dyn RngCore) -> Self {
        let g = Group::StyleEncoder;
        let reference = ReferenceEncoder::new(store, "style.ref", cfg, g, rng);
        let n = reference.output_dim();
        let mu_head = Dense::new(store, "style.mu", n, cfg.z_dim, g, rng);
        let delta_head = Dense::new(store, "style.delta", n, cfg.z_dim, g, rng);
        let ctx_head = Dense::new(store, "style.ctx", n, cfg.h_dim, g, rng);
        let flow = Iaf::new(store, "style.iaf", cfg.z_dim, cfg.h_dim, cfg.flow_hidden, cfg.flow_steps, g, rng);
        Self { reference, mu_head, delta_head, ctx_head, flow, z_dim: cfg.z_dim }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn flow(&self) -> &Iaf {
        &self.flow
    }

    pub fn reference(&self) -> &ReferenceEncoder {
        &self.reference
    }

    pub fn mu_head(&self) -> &Dense {
        &self.mu_head
    }

    /// `(mu, delta, h)` on the tape.
    pub fn encode_reference_tape(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<(Var, Var, Var)> {
        let summary = self.reference.forward(tape, store, frames)?;
        let mu = self.mu_head.forward(tape, store, summary);
        let pre = self.delta_head.forward(tape, store, summary);
        let sp = tape.softplus(pre);
        let delta = tape.affine(sp, 1.0, DELTA_FLOOR);
        let ctx = self.ctx_head.forward(tape, store, summary);
        let h = tape.tanh(ctx);
        Ok((mu, delta, h))
    }

    /// Reparameterised sample `z0 = mu + delta ⊙ eps` pushed through the flow.
    pub fn posterior_tape(&self, tape: &mut Tape, store: &ParamStore, frames: Var, eps: &[f64]) -> Result<PosteriorVars> {
        if eps.len() != self.z_dim {
            return Err(Error::Shape(format!("eps has {} dims, expected {}", eps.len(), self.z_dim)));
        }
        let (mu, delta, h) = self.encode_reference_tape(tape, store, frames)?;
        let e = tape.vector(eps.to_vec());
        let scaled = tape.mul(delta, e);
        let z0 = tape.add(mu, scaled);
        let (zk, log_dets) = self.flow.forward_tape(tape, store, z0, h);
        // log N(z0; mu, delta²) = Σ -½ln2π - ln δ - ½ε²
        let const_part: f64 = eps.iter().map(|e| -0.5 * LN_2PI - 0.5 * e * e).sum();
        let ln_delta = tape.ln(delta);
        let sum_ln = tape.sum(ln_delta);
        let mut log_q = tape.affine(sum_ln, -1.0, const_part);
        for ld in &log_dets {
            log_q = tape.sub(log_q, *ld);
        }
        Ok(PosteriorVars { mu, delta, h, z0, zk, log_dets, log_q })
    }

    pub fn encode_reference(&self, store: &ParamStore, frames: &Frames) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = self.reference.input(&mut tape, frames)?;
        let (mu, delta, h) = self.encode_reference_tape(&mut tape, store, x)?;
        Ok((tape.value(mu).to_vec(), tape.value(delta).to_vec(), tape.value(h).to_vec()))
    }

    /// Samples the posterior with noise drawn from `rng`.
    pub fn sample_style(&self, store: &ParamStore, frames: &Frames, rng: &mut dyn RngCore) -> Result<StylePosterior> {
        let eps = standard_normal(rng, self.z_dim);
        self.sample_style_with(store, frames, &eps)
    }

    pub fn sample_style_with(&self, store: &ParamStore, frames: &Frames, eps: &[f64]) -> Result<StylePosterior> {
        let mut tape = Tape::new();
        let x = self.reference.input(&mut tape, frames)?;
        let vars = self.posterior_tape(&mut tape, store, x, eps)?;
        Ok(vars.to_values(&tape))
    }

    /// Posterior mean pushed through the flow (`eps = 0`).
    pub fn deterministic_style(&self, store: &ParamStore, frames: &Frames) -> Result<Vec<f64>> {
        let (mu, _, h) = self.encode_reference(store, frames)?;
        Ok(self.flow.transform(store, &mu, &h)?.z)
    }
}

pub fn standard_normal(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit-norm speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerVector(pub Vec<f64>);

impl SpeakerVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Stacked LSTM over frames; the top layer's final state is projected and
/// L2-normalised.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    layers: Vec<LstmCell>,
    proj: Dense,
    frame_dim: usize,
    center: bool,
}

impl SpeakerEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut dyn RngCore) -> Self {
        let g = Group::SpeakerEncoder;
        let layers = (0..cfg.speaker_layers)
            .map(|i| {
                let input = if i == 0 { cfg.frame_dim } else { cfg.speaker_units };
                LstmCell::new(store, &format!("speaker.lstm{i}"), input, cfg.speaker_units, g, rng)
            })
            .collect();
        let proj = Dense::new(store, "speaker.proj", cfg.speaker_units, cfg.r_dim, g, rng);
        Self { layers, proj, frame_dim: cfg.frame_dim, center: cfg.center_speaker_input }
    }

    /// Encodes a `[T, F]` matrix node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let [t, f, _] = tape.shape(frames);
        if f != self.frame_dim {
            return Err(Error::Shape(format!("frame dim {} vs speaker encoder {}", f, self.frame_dim)));
        }
        let n = self.layers[0].hidden;
        let mut state: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|_| {
                let h = tape.vector(vec![0.0; n]);
                let c = tape.vector(vec![0.0; n]);
                (h, c)
            })
            .collect();
        let center = self.center.then(|| {
            let k = 1.0 / f as f64;
            let m: Vec<f64> = (0..f * f).map(|i| if i / f == i % f { 1.0 - k } else { -k }).collect();
            tape.input(m, [f, f, 1])
        });
        for step in 0..t {
            let mut x = tape.row(frames, step);
            if let Some(c) = center {
                x = tape.matvec(c, x);
            }
            for (layer, st) in self.layers.iter().zip(state.iter_mut()) {
                *st = layer.step(tape, store, x, st.0, st.1);
                x = st.0;
            }
        }
        let top = state.last().expect("at least one layer").0;
        let r = self.proj.forward(tape, store, top);
        Ok(tape.l2_normalize(r))
    }

    pub fn encode_speaker(&self, store: &ParamStore, frames: &Frames) -> Result<SpeakerVector> {
        if frames.dim() != self.frame_dim {
            return Err(Error::Shape(format!("frame dim {} vs speaker encoder {}", frames.dim(), self.frame_dim)));
        }
        let mut tape = Tape::new();
        let x = tape.input(frames.as_slice().to_vec(), [frames.num_frames(), frames.dim(), 1]);
        let r = self.forward(&mut tape, store, x)?;
        Ok(SpeakerVector(tape.value(r).to_vec()))
    }
}

/// `[T, F]` node minus its time-mean frame.
pub fn center_over_time(tape: &mut Tape, frames: Var) -> Var {
    let t = tape.shape(frames)[0];
    let w = tape.vector(vec![1.0 / t as f64; t]);
    let mean = tape.weighted_rows(w, frames);
    let neg = tape.scale(mean, -1.0);
    tape.add_row(frames, neg)
}

/// Mean deterministic `z_K` over the given target utterances.
pub fn compute_target_style<'a>(
    encoder: &StyleEncoder,
    store: &ParamStore,
    targets: impl IntoIterator<Item = &'a Frames>,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; encoder.z_dim()];
    let mut n = 0usize;
    for frames in targets {
        let z = encoder.deterministic_style(store, frames)?;
        sum.iter_mut().zip(&z).for_each(|(s, v)| *s += v);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no target-style utterances to compute z*".into()));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}
