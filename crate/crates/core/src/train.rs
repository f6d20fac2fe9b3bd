//! One alternating optimisation step: the discriminator minimises its
//! adversarial objective on detached transfers, then the encoders and decoder
//! minimise the weighted total with the non-saturating adversarial term.

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::decoder::{nll_tape, DecodeTrace, Feed};
use crate::encoders::{standard_normal, PosteriorVars};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::model::Model;
use crate::objectives::{
    kl_standard_normal_tape, neg_log_complement_tape, neg_log_tape, style_distortion_tape, weighted_total,
    LossBreakdown, LossWeights,
};
use crate::params::{Adam, Gradients, GroupMask};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// Transfers are decoded on their own predictions for exactly as many
    /// frames as the utterance they come from.
    TeacherLength,
    /// Transfers stop on the stop head, capped at twice the source length.
    FreeRunning,
}

/// How the cycle path decodes the source back from the re-encoded transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleDecode {
    /// Ground-truth previous frames, as in reconstruction.
    TeacherForced,
    /// Own predictions for exactly the source length.
    OwnPredictions,
}

/// How the reconstruction and cycle likelihoods are reduced over frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllReduction {
    Sum,
    /// Divided by the number of frames.
    FrameMean,
}

/// What the discriminator treats as a real target-domain sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealInput {
    /// `T(r_t, z*)`, decoded like the transfers.
    Reconstruction,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub weights: LossWeights,
    /// Weight of an extra KL-to-prior term on the source posteriors.
    pub kl_weight: f64,
    pub cycle_mode: CycleMode,
    /// Detach transfers before they are re-encoded in the cycle path.
    pub cycle_stop_gradient: bool,
    pub cycle_decode: CycleDecode,
    /// Probability of replacing a ground-truth previous frame by the go
    /// frame in teacher-forced decodes.
    pub frame_dropout: f64,
    pub nll_reduction: NllReduction,
    pub real_input: RealInput,
    pub d_steps: usize,
    pub update_discriminator: bool,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub clip_norm: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            kl_weight: 0.0,
            cycle_mode: CycleMode::TeacherLength,
            cycle_stop_gradient: false,
            cycle_decode: CycleDecode::TeacherForced,
            frame_dropout: 0.5,
            nll_reduction: NllReduction::FrameMean,
            real_input: RealInput::Reconstruction,
            d_steps: 1,
            update_discriminator: true,
            lr_generator: 1e-3,
            lr_discriminator: 5e-4,
            clip_norm: 1.0,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |s: &str| Err(Error::Config(s.into()));
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be finite and non-negative");
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.frame_dropout) {
            return bad("frame_dropout must be in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.d_steps == 0 && self.update_discriminator {
            return bad("d_steps must be at least 1 when the discriminator is trained");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SourceItem<'a> {
    pub tokens: &'a [usize],
    pub frames: &'a Frames,
    /// Frozen style-discriminator probability for this utterance.
    pub p_style: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub tokens: &'a [usize],
    pub frames: &'a Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
}

impl Optimizers {
    pub fn new(model: &Model, cfg: &StepConfig) -> Self {
        Self {
            generator: Adam::new(&model.store, cfg.lr_generator),
            discriminator: Adam::new(&model.store, cfg.lr_discriminator),
        }
    }
}

/// Differentiable terms of one source utterance.
pub struct SourceGraph {
    pub tape: Tape,
    pub posterior: PosteriorVars,
    pub rec: Var,
    pub cyc: Var,
    pub dis: Var,
    pub kl: Var,
    /// Transfer `x̃_s = T(r_s, z*)` as a `[T', F]` node.
    pub transfer: Var,
}

pub struct TargetGraph {
    pub tape: Tape,
    pub rec: Var,
    pub cyc: Var,
    /// Self-transfer `x̃_t = T(r_t, z*)`.
    pub transfer: Var,
}

fn frames_input(tape: &mut Tape, f: &Frames) -> Var {
    tape.input(f.as_slice().to_vec(), [f.num_frames(), f.dim(), 1])
}

/// Teacher input with the rows where `keep` is false set to the go frame.
/// An empty `keep` keeps every row.
fn teacher_input(frames: &Frames, keep: &[bool]) -> Frames {
    if keep.iter().all(|&k| k) {
        return frames.clone();
    }
    let f = frames.dim();
    let mut data = frames.as_slice().to_vec();
    for (row, _) in data.chunks_mut(f).zip(keep).filter(|(_, &k)| !k) {
        row.fill(0.0);
    }
    Frames::new(frames.num_frames(), f, data).expect("zeroed rows stay finite")
}

/// Per-frame keep flags for one teacher-forced utterance.
pub fn draw_keep(rng: &mut dyn RngCore, frames: usize, dropout: f64) -> Vec<bool> {
    if dropout == 0.0 {
        return Vec::new();
    }
    let keep = Bernoulli::new(1.0 - dropout).expect("validated dropout");
    (0..frames).map(|_| keep.sample(rng)).collect()
}

fn likelihood(tape: &mut Tape, cfg: &StepConfig, trace: &DecodeTrace, frames: &Frames) -> Result<Var> {
    let nll = nll_tape(tape, trace, frames)?;
    Ok(match cfg.nll_reduction {
        NllReduction::Sum => nll,
        NllReduction::FrameMean => tape.scale(nll, 1.0 / frames.num_frames() as f64),
    })
}

fn cycle_feed(mode: CycleDecode, frames: &Frames) -> Feed<'_> {
    match mode {
        CycleDecode::TeacherForced => Feed::Teacher(frames),
        CycleDecode::OwnPredictions => Feed::FixedLength(frames.num_frames()),
    }
}

fn transfer_feed(mode: CycleMode, n: usize) -> Feed<'static> {
    match mode {
        CycleMode::TeacherLength => Feed::FixedLength(n),
        CycleMode::FreeRunning => Feed::Free { max_frames: 2 * n },
    }
}

/// Speaker vector of a decoded transfer, optionally detached.
fn reencode(model: &Model, tape: &mut Tape, transfer: Var, detach: bool) -> Result<Var> {
    let x = if detach {
        let v = tape.value(transfer).to_vec();
        let shape = tape.shape(transfer);
        tape.input(v, shape)
    } else {
        transfer
    };
    model.speaker.forward(tape, &model.store, x)
}

fn stacked(tape: &mut Tape, trace: &DecodeTrace) -> Var {
    trace.stacked(tape)
}

pub fn source_graph(
    model: &Model,
    cfg: &StepConfig,
    item: &SourceItem<'_>,
    z_star: &[f64],
    eps: &[f64],
    keep: &[bool],
) -> Result<SourceGraph> {
    let store = &model.store;
    let input = teacher_input(item.frames, keep);
    let mut tape = Tape::new();
    let x = frames_input(&mut tape, item.frames);
    let posterior = model.style.posterior_tape(&mut tape, store, x, eps)?;
    let z_s = posterior.zk;
    let r_s = model.speaker.forward(&mut tape, store, x)?;
    let zs_const = tape.vector(z_star.to_vec());

    let c_rec = tape.concat(&[r_s, z_s]);
    let trace = model.decoder.decode_tape(&mut tape, store, item.tokens, c_rec, Feed::Teacher(&input))?;
    let rec = likelihood(&mut tape, cfg, &trace, item.frames)?;

    let c_tr = tape.concat(&[r_s, zs_const]);
    let feed = transfer_feed(cfg.cycle_mode, item.frames.num_frames());
    let tr = model.decoder.decode_tape(&mut tape, store, item.tokens, c_tr, feed)?;
    let transfer = stacked(&mut tape, &tr);

    let r_cyc = reencode(model, &mut tape, transfer, cfg.cycle_stop_gradient)?;
    let c_cyc = tape.concat(&[r_cyc, z_s]);
    let back = model.decoder.decode_tape(&mut tape, store, item.tokens, c_cyc, cycle_feed(cfg.cycle_decode, &input))?;
    let cyc = likelihood(&mut tape, cfg, &back, item.frames)?;

    let dis = style_distortion_tape(&mut tape, z_s, z_star, item.p_style);
    let kl = kl_standard_normal_tape(&mut tape, posterior.mu, posterior.delta);
    Ok(SourceGraph { tape, posterior, rec, cyc, dis, kl, transfer })
}

pub fn target_graph(
    model: &Model,
    cfg: &StepConfig,
    item: &TargetItem<'_>,
    z_star: &[f64],
    keep: &[bool],
) -> Result<TargetGraph> {
    let store = &model.store;
    let input = teacher_input(item.frames, keep);
    let mut tape = Tape::new();
    let x = frames_input(&mut tape, item.frames);
    let r_t = model.speaker.forward(&mut tape, store, x)?;
    let zs = tape.vector(z_star.to_vec());
    let c = tape.concat(&[r_t, zs]);
    let trace = model.decoder.decode_tape(&mut tape, store, item.tokens, c, Feed::Teacher(&input))?;
    let rec = likelihood(&mut tape, cfg, &trace, item.frames)?;

    let feed = transfer_feed(cfg.cycle_mode, item.frames.num_frames());
    let tr = model.decoder.decode_tape(&mut tape, store, item.tokens, c, feed)?;
    let transfer = stacked(&mut tape, &tr);

    let r_cyc = reencode(model, &mut tape, transfer, cfg.cycle_stop_gradient)?;
    let c_cyc = tape.concat(&[r_cyc, zs]);
    let back = model.decoder.decode_tape(&mut tape, store, item.tokens, c_cyc, cycle_feed(cfg.cycle_decode, &input))?;
    let cyc = likelihood(&mut tape, cfg, &back, item.frames)?;
    Ok(TargetGraph { tape, rec, cyc, transfer })
}

fn values_of(tape: &Tape, v: Var) -> Frames {
    let [t, f, _] = tape.shape(v);
    Frames::new(t, f, tape.value(v).to_vec()).expect("finite decoder output")
}

/// Discriminator objective on detached samples; accumulates its gradient
/// into `grads` when given.
pub fn discriminator_objective(
    model: &Model,
    fake: &[Frames],
    real: &[Frames],
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let mut total = 0.0;
    for (set, is_real) in [(fake, false), (real, true)] {
        let k = 1.0 / set.len() as f64;
        for f in set {
            let mut tape = Tape::new();
            let x = frames_input(&mut tape, f);
            let p = model.disc.forward(&mut tape, &model.store, x)?;
            let l = if is_real { neg_log_tape(&mut tape, p) } else { neg_log_complement_tape(&mut tape, p) };
            total += k * tape.scalar(l);
            if let Some(g) = grads.as_deref_mut() {
                tape.backward(l, k, &model.store, g, GroupMask::DISCRIMINATOR);
            }
        }
    }
    Ok(total)
}

/// Appends `−ln D(x̃_s)` to a source graph using the current discriminator.
pub fn append_generator_adversarial(model: &Model, g: &mut SourceGraph) -> Result<Var> {
    let p = model.disc.forward(&mut g.tape, &model.store, g.transfer)?;
    Ok(neg_log_tape(&mut g.tape, p))
}

/// Weighted sum of the generator terms on one source tape, or `None` when
/// every weight is zero.
fn source_objective(tape: &mut Tape, w: &LossWeights, kl_weight: f64, terms: [Var; 5]) -> Option<Var> {
    let [rec, adv, dis, cyc, kl] = terms;
    weighted_sum(tape, &[(w.alpha, rec), (w.beta, adv), (w.gamma, dis), (w.lambda, cyc), (kl_weight, kl)])
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    acc
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Step outputs beyond the logged losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub losses: LossBreakdown,
    pub l_kl: f64,
    pub generator_grad_norm: f64,
    pub discriminator_grad_norm: f64,
}

/// Runs one full training step on paired batches. Noise for the source
/// posteriors is drawn from `rng` in batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut Optimizers,
    cfg: &StepConfig,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    z_star: &[f64],
    rng: &mut dyn RngCore,
    step: u64,
) -> Result<StepStats> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("training step needs non-empty source and target batches".into()));
    }
    let w = cfg.weights;
    let (bs, bt) = (source.len(), target.len());

    let mut sg = Vec::with_capacity(bs);
    for item in source {
        let eps = standard_normal(rng, model.z_dim());
        let keep = draw_keep(rng, item.frames.num_frames(), cfg.frame_dropout);
        sg.push(source_graph(model, cfg, item, z_star, &eps, &keep)?);
    }
    let mut tg = Vec::with_capacity(bt);
    for item in target {
        let keep = draw_keep(rng, item.frames.num_frames(), cfg.frame_dropout);
        tg.push(target_graph(model, cfg, item, z_star, &keep)?);
    }

    // discriminator phase on detached samples
    let fake: Vec<Frames> = sg.iter().map(|g| values_of(&g.tape, g.transfer)).collect();
    let real: Vec<Frames> = match cfg.real_input {
        RealInput::Reconstruction => tg.iter().map(|g| values_of(&g.tape, g.transfer)).collect(),
        RealInput::GroundTruth => target.iter().map(|t| t.frames.clone()).collect(),
    };
    let mut l_adv_d = f64::NAN;
    let mut d_norm = 0.0;
    let sub_steps = if cfg.update_discriminator { cfg.d_steps } else { 0 };
    for k in 0..sub_steps {
        let mut grads = Gradients::zeros_like(&model.store);
        let l = discriminator_objective(model, &fake, &real, Some(&mut grads))?;
        if k == 0 {
            l_adv_d = l;
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { term: "l_adv_d", step });
        }
        d_norm = grads.clip(GroupMask::DISCRIMINATOR, cfg.clip_norm);
        opt.discriminator.update(&mut model.store, &grads, GroupMask::DISCRIMINATOR);
    }
    if sub_steps == 0 {
        l_adv_d = discriminator_objective(model, &fake, &real, None)?;
    }

    // generator phase against the updated discriminator
    let mut adv = Vec::with_capacity(bs);
    for g in sg.iter_mut() {
        adv.push(append_generator_adversarial(model, g)?);
    }
    let src_val = |f: &dyn Fn(&SourceGraph) -> Var| mean(sg.iter().map(|g| g.tape.scalar(f(g))), bs);
    let l_rec = src_val(&|g| g.rec) + mean(tg.iter().map(|g| g.tape.scalar(g.rec)), bt);
    let l_cyc = src_val(&|g| g.cyc) + mean(tg.iter().map(|g| g.tape.scalar(g.cyc)), bt);
    let l_dis = src_val(&|g| g.dis);
    let l_kl = src_val(&|g| g.kl);
    let l_adv_g = mean(sg.iter().zip(&adv).map(|(g, a)| g.tape.scalar(*a)), bs);
    let losses = LossBreakdown {
        l_rec,
        l_adv_d,
        l_adv_g,
        l_dis,
        l_cyc,
        total: weighted_total(&w, l_rec, l_adv_g, l_dis, l_cyc),
        weights: w,
    };
    if let Some(term) = losses.non_finite_term() {
        return Err(Error::NonFiniteLoss { term, step });
    }

    let mut grads = Gradients::zeros_like(&model.store);
    for (g, a) in sg.iter_mut().zip(&adv) {
        let terms = [g.rec, *a, g.dis, g.cyc, g.kl];
        if let Some(root) = source_objective(&mut g.tape, &w, cfg.kl_weight, terms) {
            g.tape.backward(root, 1.0 / bs as f64, &model.store, &mut grads, GroupMask::GENERATOR);
        }
    }
    for g in tg.iter_mut() {
        if let Some(root) = weighted_sum(&mut g.tape, &[(w.alpha, g.rec), (w.lambda, g.cyc)]) {
            g.tape.backward(root, 1.0 / bt as f64, &model.store, &mut grads, GroupMask::GENERATOR);
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss { term: "generator gradient", step });
    }
    let g_norm = grads.clip(GroupMask::GENERATOR, cfg.clip_norm);
    opt.generator.update(&mut model.store, &grads, GroupMask::GENERATOR);
    Ok(StepStats { losses, l_kl, generator_grad_norm: g_norm, discriminator_grad_norm: d_norm })
}

/// A single loss term as a function of the parameters, for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Rec,
    AdvD,
    AdvG,
    Dis,
    Cyc,
}

/// Value of `term` on fixed batches and noise, with its gradient over the
/// groups that term trains (discriminator for `AdvD`, generator otherwise).
/// Frame dropout is off; its masks are constants of the graph.
pub fn term_gradient(
    model: &Model,
    cfg: &StepConfig,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    z_star: &[f64],
    eps: &[Vec<f64>],
    term: Term,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(&model.store);
    let (bs, bt) = (source.len() as f64, target.len() as f64);
    if term == Term::AdvD {
        let fake: Vec<Frames> = source
            .iter()
            .zip(eps)
            .map(|(s, e)| source_graph(model, cfg, s, z_star, e, &[]).map(|g| values_of(&g.tape, g.transfer)))
            .collect::<Result<_>>()?;
        let real: Vec<Frames> = match cfg.real_input {
            RealInput::Reconstruction => target
                .iter()
                .map(|t| target_graph(model, cfg, t, z_star, &[]).map(|g| values_of(&g.tape, g.transfer)))
                .collect::<Result<_>>()?,
            RealInput::GroundTruth => target.iter().map(|t| t.frames.clone()).collect(),
        };
        let v = discriminator_objective(model, &fake, &real, Some(&mut grads))?;
        return Ok((v, grads));
    }
    let mut value = 0.0;
    for (s, e) in source.iter().zip(eps) {
        let mut g = source_graph(model, cfg, s, z_star, e, &[])?;
        let root = match term {
            Term::Rec => g.rec,
            Term::Cyc => g.cyc,
            Term::Dis => g.dis,
            Term::AdvG => append_generator_adversarial(model, &mut g)?,
            Term::AdvD => unreachable!(),
        };
        value += g.tape.scalar(root) / bs;
        g.tape.backward(root, 1.0 / bs, &model.store, &mut grads, GroupMask::GENERATOR);
    }
    if matches!(term, Term::Rec | Term::Cyc) {
        for t in target {
            let g = target_graph(model, cfg, t, z_star, &[])?;
            let root = if term == Term::Rec { g.rec } else { g.cyc };
            value += g.tape.scalar(root) / bt;
            g.tape.backward(root, 1.0 / bt, &model.store, &mut grads, GroupMask::GENERATOR);
        }
    }
    Ok((value, grads))
}

/// Mean per-utterance distance of deterministic styles to `z_star`.
pub fn style_spread<'a>(model: &Model, targets: impl IntoIterator<Item = &'a Frames>, z_star: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in targets {
        let z = model.style.deterministic_style(&model.store, f)?;
        sum += libm::sqrt(crate::objectives::squared_distance(&z, z_star));
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Zero vector of the model's style width.
pub fn zero_style(model: &Model) -> Vec<f64> {
    vec![0.0; model.z_dim()]
}
