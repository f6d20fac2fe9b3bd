//! Adversarial discriminator `D` over decoder outputs and the pre-trained
//! style discriminator `D_s` that weights the style distortion loss.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoders::{center_over_time, EncoderConfig, ReferenceEncoder};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::nn::{ConvStack, Dense};
use crate::params::{Adam, Gradients, Group, GroupMask, Init, ParamStore};
use crate::tape::{Tape, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub frame_dim: usize,
    pub channels: Vec<usize>,
    /// Subtract the time-mean frame from the input.
    pub center_input: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { frame_dim: 32, channels: alloc::vec![4, 8, 8, 16], center_input: true }
    }
}

/// Strided conv stack, global average pool and a sigmoid unit. Accepts any
/// number of frames.
#[derive(Debug, Clone)]
pub struct Discriminator {
    conv: ConvStack,
    out: Dense,
    frame_dim: usize,
    center: bool,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: &DiscriminatorConfig, rng: &mut dyn RngCore) -> Self {
        let strides = alloc::vec![2; cfg.channels.len()];
        let conv = ConvStack::new(store, "disc.conv", &cfg.channels, &strides, Group::Discriminator, rng);
        // zero output layer: p = 0.5 for every input until trained
        let out = Dense::with_init(
            store,
            "disc.out",
            conv.out_channels(),
            1,
            Group::Discriminator,
            Init::Zeros,
            Init::Zeros,
            rng,
        );
        Self { conv, out, frame_dim: cfg.frame_dim, center: cfg.center_input }
    }

    /// Clamped probability that a `[T, F]` frame node is a target-domain
    /// reconstruction rather than a transfer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, frames: Var) -> Result<Var> {
        let [t, f, _] = tape.shape(frames);
        if f != self.frame_dim {
            return Err(Error::Shape(format!("frame dim {} vs discriminator {}", f, self.frame_dim)));
        }
        let frames = if self.center { center_over_time(tape, frames) } else { frames };
        let plane = tape.reshape(frames, [1, t, f]);
        let maps = self.conv.forward(tape, store, plane);
        let pooled = tape.mean_spatial(maps);
        let logit = self.out.forward(tape, store, pooled);
        let p = tape.sigmoid(logit);
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    pub fn discriminate(&self, store: &ParamStore, frames: &Frames) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(frames.as_slice().to_vec(), [frames.num_frames(), frames.dim(), 1]);
        let p = self.forward(&mut tape, store, x)?;
        Ok(tape.scalar(p))
    }
}

/// Binary target-style classifier with the style encoder's reference network
/// followed by a sigmoid unit. Owns its parameters, which are frozen once
/// pretraining returns.
#[derive(Debug, Clone)]
pub struct StyleDiscriminator {
    net: ReferenceEncoder,
    out: Dense,
    store: ParamStore,
    pretrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: usize,
    pub accuracy_gate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-3, max_epochs: 40, batch_size: 8, patience: 6, accuracy_gate: 0.9, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_size: usize,
    pub train_positives: usize,
    pub heldout_size: usize,
    pub heldout_accuracy: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub accuracy_gate: f64,
}

/// One labelled example for `D_s`; `is_target` is the positive class.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub frames: &'a Frames,
    pub is_target: bool,
}

impl StyleDiscriminator {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ReferenceEncoder::new(&mut store, "ds.ref", cfg, Group::StyleDiscriminator, &mut rng);
        let out = Dense::new(&mut store, "ds.out", net.output_dim(), 1, Group::StyleDiscriminator, &mut rng);
        Self { net, out, store, pretrained: false }
    }

    /// Rebuilds a frozen discriminator from stored parameter values.
    pub fn from_values(cfg: &EncoderConfig, values: &[f64]) -> Result<Self> {
        let mut ds = Self::new(cfg, 0);
        ds.store.set_group_values(Group::StyleDiscriminator, values)?;
        ds.pretrained = true;
        Ok(ds)
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn logit(&self, tape: &mut Tape, frames: &Frames) -> Result<Var> {
        let x = self.net.input(tape, frames)?;
        let summary = self.net.forward(tape, &self.store, x)?;
        Ok(self.out.forward(tape, &self.store, summary))
    }

    fn probability_unchecked(&self, frames: &Frames) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logit(&mut tape, frames)?;
        Ok(clamp_probability(crate::tape::sigmoid(tape.scalar(l))))
    }

    /// `p_Ds(x ∈ X_t)`, clamped.
    pub fn style_probability(&self, frames: &Frames) -> Result<f64> {
        if !self.pretrained {
            return Err(Error::NotPretrained);
        }
        self.probability_unchecked(frames)
    }

    fn accuracy(&self, data: &[Labelled<'_>]) -> Result<f64> {
        let mut correct = 0usize;
        for ex in data {
            let p = self.probability_unchecked(ex.frames)?;
            if (p > 0.5) == ex.is_target {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Trains with class-balanced binary cross-entropy, keeps the parameters
    /// with the best held-out accuracy and freezes them. Fails if that
    /// accuracy is below the configured gate.
    pub fn pretrain(
        enc_cfg: &EncoderConfig,
        train: &[Labelled<'_>],
        heldout: &[Labelled<'_>],
        cfg: &PretrainConfig,
    ) -> Result<(Self, PretrainReport)> {
        let positives = train.iter().filter(|e| e.is_target).count();
        if positives == 0 || positives == train.len() {
            return Err(Error::Data("style discriminator needs both target and non-target examples".into()));
        }
        if heldout.is_empty() {
            return Err(Error::Data("style discriminator needs held-out examples".into()));
        }
        let mut ds = Self::new(enc_cfg, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut opt = Adam::new(&ds.store, cfg.learning_rate);
        let mask = GroupMask::STYLE_DISCRIMINATOR;
        let pos_w = (train.len() - positives) as f64 / positives as f64;

        let mut best = (ds.accuracy(heldout)?, 0usize, ds.store.clone());
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epochs_run = 0;
        for epoch in 1..=cfg.max_epochs {
            epochs_run = epoch;
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut grads = Gradients::zeros_like(&ds.store);
                let norm: f64 = chunk.iter().map(|&i| if train[i].is_target { pos_w } else { 1.0 }).sum();
                for &i in chunk {
                    let ex = &train[i];
                    let mut tape = Tape::new();
                    let l = ds.logit(&mut tape, ex.frames)?;
                    // BCE with logits: softplus(l) - y·l
                    let sp = tape.softplus(l);
                    let loss = if ex.is_target { tape.sub(sp, l) } else { sp };
                    let w = if ex.is_target { pos_w } else { 1.0 };
                    tape.backward(loss, w / norm, &ds.store, &mut grads, mask);
                }
                grads.clip(mask, 1.0);
                opt.update(&mut ds.store, &grads, mask);
            }
            let acc = ds.accuracy(heldout)?;
            if acc > best.0 {
                best = (acc, epoch, ds.store.clone());
            }
            if best.0 >= 1.0 || epoch - best.1 >= cfg.patience {
                break;
            }
        }
        ds.store = best.2;
        ds.pretrained = true;
        let report = PretrainReport {
            train_size: train.len(),
            train_positives: positives,
            heldout_size: heldout.len(),
            heldout_accuracy: best.0,
            epochs_run,
            best_epoch: best.1,
            accuracy_gate: cfg.accuracy_gate,
        };
        if report.heldout_accuracy < cfg.accuracy_gate {
            return Err(Error::Gate { model: "style discriminator", accuracy: report.heldout_accuracy, gate: cfg.accuracy_gate });
        }
        Ok((ds, report))
    }
}

/// Fisher-Yates shuffle driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut dyn RngCore) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}
