//! Compact attention decoder: token embedding, bidirectional GRU text
//! encoder, one-layer GRU decoder with content-based attention, linear frame
//! and stop projections. The conditioning vector `[r ‖ z]` only sets the
//! initial decoder state unless `per_step_conditioning` is on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::nn::{Dense, GruCell};
use crate::params::{Group, Init, ParamId, ParamStore};
use crate::tape::{sigmoid, softplus, Tape, Var};

/// Weight on the positive (final-frame) stop target.
pub const STOP_POS_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub frame_dim: usize,
    /// Width of the conditioning vector, `D_r + D_z`.
    pub cond_dim: usize,
    pub embed_dim: usize,
    pub text_units: usize,
    pub decoder_units: usize,
    pub attention_dim: usize,
    #[serde(default)]
    pub per_step_conditioning: bool,
    /// Number of leading conditioning entries (the speaker vector) mapped by
    /// a learned projection onto every output frame; 0 disables it.
    pub speaker_projection: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            frame_dim: 32,
            cond_dim: 24,
            embed_dim: 16,
            text_units: 16,
            decoder_units: 48,
            attention_dim: 24,
            per_step_conditioning: false,
            speaker_projection: 0,
        }
    }
}

/// Decoder outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub frames_hat: Frames,
    pub stop_logits: Vec<f64>,
    /// One attention distribution over tokens per output frame.
    pub attention_weights: Vec<Vec<f64>>,
}

/// Decoder outputs as tape handles.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub frames: Vec<Var>,
    pub stops: Vec<Var>,
    pub attention: Vec<Var>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Output frames stacked into a `[T', F]` node.
    pub fn stacked(&self, tape: &mut Tape) -> Var {
        tape.stack_rows(&self.frames)
    }

    pub fn to_output(&self, tape: &Tape) -> DecoderOutput {
        let dim = tape.value(self.frames[0]).len();
        let data = self.frames.iter().flat_map(|v| tape.value(*v).iter().copied()).collect();
        DecoderOutput {
            frames_hat: Frames::new(self.frames.len(), dim, data).expect("decoder produced finite frames"),
            stop_logits: self.stops.iter().map(|v| tape.scalar(*v)).collect(),
            attention_weights: self.attention.iter().map(|v| tape.value(*v).to_vec()).collect(),
        }
    }
}

/// What the decoder reads as its previous frame at each step.
#[derive(Debug, Clone, Copy)]
pub enum Feed<'a> {
    /// Ground-truth previous frames; emits exactly one frame per target frame.
    Teacher(&'a Frames),
    /// Feeds back its own predictions for exactly `n` steps, ignoring stop.
    FixedLength(usize),
    /// Feeds back predictions until `sigmoid(stop) > 0.5` or `max_frames`.
    Free { max_frames: usize },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    embed: ParamId,
    text_fwd: GruCell,
    text_bwd: GruCell,
    init: Dense,
    rnn: GruCell,
    query: Dense,
    keys: Dense,
    score: ParamId,
    frame_out: Dense,
    stop_out: Dense,
    speaker_out: Option<Dense>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut dyn RngCore) -> Self {
        let g = Group::Decoder;
        let embed = store.add("dec.embed", [cfg.embed_dim, cfg.vocab_size, 1], g, Init::Uniform(0.5), rng);
        let text_fwd = GruCell::new(store, "dec.text_fwd", cfg.embed_dim, cfg.text_units, g, rng);
        let text_bwd = GruCell::new(store, "dec.text_bwd", cfg.embed_dim, cfg.text_units, g, rng);
        let init = Dense::new(store, "dec.init", cfg.cond_dim, cfg.decoder_units, g, rng);
        let memory = 2 * cfg.text_units;
        let rnn_in = cfg.frame_dim + memory + if cfg.per_step_conditioning { cfg.cond_dim } else { 0 };
        let rnn = GruCell::new(store, "dec.rnn", rnn_in, cfg.decoder_units, g, rng);
        let query = Dense::new(store, "dec.query", cfg.decoder_units, cfg.attention_dim, g, rng);
        let keys = Dense::new(store, "dec.keys", memory, cfg.attention_dim, g, rng);
        let score = store.add("dec.score", [cfg.attention_dim, 1, 1], g, Init::Uniform(0.5), rng);
        let frame_out = Dense::new(store, "dec.frame_out", cfg.decoder_units + memory, cfg.frame_dim, g, rng);
        let stop_out = Dense::new(store, "dec.stop_out", cfg.decoder_units + memory, 1, g, rng);
        let speaker_out = (cfg.speaker_projection > 0)
            .then(|| Dense::new(store, "dec.speaker_out", cfg.speaker_projection, cfg.frame_dim, g, rng));
        Self { cfg: cfg.clone(), embed, text_fwd, text_bwd, init, rnn, query, keys, score, frame_out, stop_out, speaker_out }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Handle of the stop projection bias, for forcing stop behaviour.
    pub fn stop_bias(&self) -> ParamId {
        self.stop_out.b
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens);
        }
        if let Some(&t) = tokens.iter().find(|t| **t >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: self.cfg.vocab_size });
        }
        Ok(())
    }

    /// Records a full decoding pass on the tape.
    pub fn decode_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[usize],
        cond: Var,
        feed: Feed<'_>,
    ) -> Result<DecodeTrace> {
        self.validate_tokens(tokens)?;
        let c_len = tape.value(cond).len();
        if c_len != self.cfg.cond_dim {
            return Err(Error::Shape(format!("conditioning vector has {} dims, expected {}", c_len, self.cfg.cond_dim)));
        }
        let steps = match feed {
            Feed::Teacher(frames) => {
                if frames.dim() != self.cfg.frame_dim {
                    return Err(Error::Shape(format!("frame dim {} vs decoder {}", frames.dim(), self.cfg.frame_dim)));
                }
                frames.num_frames()
            }
            Feed::FixedLength(n) => n,
            Feed::Free { max_frames } => max_frames,
        };
        if steps == 0 {
            return Err(Error::Config("decoder needs at least one output frame".into()));
        }

        // text memory
        let onehots: Vec<Var> = tokens
            .iter()
            .map(|&t| {
                let mut v = vec![0.0; self.cfg.vocab_size];
                v[t] = 1.0;
                let x = tape.vector(v);
                tape.linear(store, self.embed, None, x)
            })
            .collect();
        let emb = tape.stack_rows(&onehots);
        let fwd = self.text_fwd.run(tape, store, emb, false);
        let bwd = self.text_bwd.run(tape, store, emb, true);
        let rows: Vec<Var> = fwd.iter().zip(&bwd).map(|(f, b)| tape.concat(&[*f, *b])).collect();
        let memory = tape.stack_rows(&rows);
        let keys = self.keys.forward_rows(tape, store, memory);
        let score = tape.param(store, self.score);

        let init = self.init.forward(tape, store, cond);
        let mut h = tape.tanh(init);
        let mut ctx = tape.vector(vec![0.0; 2 * self.cfg.text_units]);
        let mut prev = tape.vector(vec![0.0; self.cfg.frame_dim]);
        let offset = self.speaker_out.as_ref().map(|d| {
            let r = tape.slice(cond, 0, self.cfg.speaker_projection);
            d.forward(tape, store, r)
        });
        let mut trace = DecodeTrace { frames: Vec::new(), stops: Vec::new(), attention: Vec::new() };

        for t in 0..steps {
            let x = if self.cfg.per_step_conditioning {
                tape.concat(&[prev, ctx, cond])
            } else {
                tape.concat(&[prev, ctx])
            };
            h = self.rnn.step(tape, store, x, h);
            let q = self.query.forward(tape, store, h);
            let e = tape.add_row(keys, q);
            let e = tape.tanh(e);
            let scores = tape.matvec(e, score);
            let align = tape.softmax(scores);
            ctx = tape.weighted_rows(align, memory);
            let out_in = tape.concat(&[h, ctx]);
            let mut frame = self.frame_out.forward(tape, store, out_in);
            if let Some(o) = offset {
                frame = tape.add(frame, o);
            }
            let stop = self.stop_out.forward(tape, store, out_in);
            trace.frames.push(frame);
            trace.stops.push(stop);
            trace.attention.push(align);
            prev = match feed {
                Feed::Teacher(frames) => tape.vector(frames.row(t).to_vec()),
                _ => frame,
            };
            if let Feed::Free { .. } = feed {
                if sigmoid(tape.scalar(stop)) > 0.5 {
                    break;
                }
            }
        }
        Ok(trace)
    }

    pub fn decode_teacher_forced(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        cond: &[f64],
        frames: &Frames,
    ) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let c = tape.vector(cond.to_vec());
        let trace = self.decode_tape(&mut tape, store, tokens, c, Feed::Teacher(frames))?;
        Ok(trace.to_output(&tape))
    }

    pub fn decode_free_running(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        cond: &[f64],
        max_frames: usize,
    ) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let c = tape.vector(cond.to_vec());
        let trace = self.decode_tape(&mut tape, store, tokens, c, Feed::Free { max_frames })?;
        Ok(trace.to_output(&tape))
    }
}

/// Stop targets for a `T`-frame utterance: 1 on the final frame only.
pub fn stop_targets(num_frames: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_frames];
    v[num_frames - 1] = 1.0;
    v
}

fn stop_weights(targets: &[f64]) -> Vec<f64> {
    targets.iter().map(|y| if *y > 0.5 { STOP_POS_WEIGHT } else { 1.0 }).collect()
}

/// Negative log-likelihood under a unit-variance Gaussian per frame element
/// (constants dropped) plus weighted stop-token cross-entropy:
/// `½ Σ (ŷ - y)² + Σ w_t · BCE(stop_t, target_t)`.
pub fn nll(frames_hat: &Frames, stop_logits: &[f64], frames: &Frames, stop_targets: &[f64]) -> Result<f64> {
    if frames_hat.num_frames() != frames.num_frames() || frames_hat.dim() != frames.dim() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs target {}x{}",
            frames_hat.num_frames(),
            frames_hat.dim(),
            frames.num_frames(),
            frames.dim()
        )));
    }
    if stop_logits.len() != frames.num_frames() || stop_targets.len() != frames.num_frames() {
        return Err(Error::Shape(format!("stop vectors must have {} entries", frames.num_frames())));
    }
    let gauss: f64 =
        0.5 * frames_hat.as_slice().iter().zip(frames.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let w = stop_weights(stop_targets);
    let bce: f64 = stop_logits
        .iter()
        .zip(stop_targets)
        .zip(&w)
        .map(|((l, y), w)| w * (softplus(*l) - y * l))
        .sum();
    Ok(gauss + bce)
}

/// Tape version of [`nll`] for a teacher-forced trace.
pub fn nll_tape(tape: &mut Tape, trace: &DecodeTrace, frames: &Frames) -> Result<Var> {
    if trace.len() != frames.num_frames() {
        return Err(Error::Shape(format!("trace has {} frames, target {}", trace.len(), frames.num_frames())));
    }
    let pred = trace.stacked(tape);
    let target = tape.input(frames.as_slice().to_vec(), [frames.num_frames(), frames.dim(), 1]);
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let sq = tape.sum(sq);
    let gauss = tape.scale(sq, 0.5);

    let targets = stop_targets(frames.num_frames());
    let w = stop_weights(&targets);
    let logits = tape.concat(&trace.stops);
    let sp = tape.softplus(logits);
    let wv = tape.vector(w.clone());
    let wsp = tape.mul(sp, wv);
    let wy = tape.vector(w.iter().zip(&targets).map(|(w, y)| w * y).collect());
    let lin = tape.mul(logits, wy);
    let bce = tape.sub(wsp, lin);
    let bce = tape.sum(bce);
    Ok(tape.add(gauss, bce))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GroupMask;
    use crate::params::Gradients;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn tiny() -> (Decoder, ParamStore) {
        let cfg = DecoderConfig {
            vocab_size: 5,
            frame_dim: 3,
            cond_dim: 4,
            embed_dim: 3,
            text_units: 3,
            decoder_units: 5,
            attention_dim: 3,
            per_step_conditioning: false,
            speaker_projection: 0,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (Decoder::new(&mut store, &cfg, &mut rng), store)
    }

    fn frames(t: usize, f: usize) -> Frames {
        Frames::new(t, f, (0..t * f).map(|i| libm::sin(i as f64)).collect()).unwrap()
    }

    #[test]
    fn teacher_forcing_emits_one_frame_per_target() {
        let (dec, store) = tiny();
        let x = frames(7, 3);
        let out = dec.decode_teacher_forced(&store, &[1, 2, 3], &[0.1, 0.2, 0.3, 0.4], &x).unwrap();
        assert_eq!(out.frames_hat.num_frames(), 7);
        assert_eq!(out.stop_logits.len(), 7);
        for row in &out.attention_weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert_eq!(row.len(), 3);
        }
    }

    #[test]
    fn rejects_empty_tokens_and_bad_conditioning() {
        let (dec, store) = tiny();
        let x = frames(4, 3);
        assert_eq!(dec.decode_teacher_forced(&store, &[], &[0.0; 4], &x), Err(Error::EmptyTokens));
        assert!(matches!(dec.decode_teacher_forced(&store, &[1], &[0.0; 3], &x), Err(Error::Shape(_))));
        assert!(matches!(
            dec.decode_teacher_forced(&store, &[9], &[0.0; 4], &x),
            Err(Error::TokenOutOfRange { token: 9, vocab: 5 })
        ));
    }

    #[test]
    fn stop_bias_forces_length() {
        let (dec, mut store) = tiny();
        store.values_mut(dec.stop_bias())[0] = 50.0;
        let out = dec.decode_free_running(&store, &[1, 2], &[0.0; 4], 20).unwrap();
        assert_eq!(out.frames_hat.num_frames(), 1);
        store.values_mut(dec.stop_bias())[0] = -50.0;
        let out = dec.decode_free_running(&store, &[1, 2], &[0.0; 4], 20).unwrap();
        assert_eq!(out.frames_hat.num_frames(), 20);
        let again = dec.decode_free_running(&store, &[1, 2], &[0.0; 4], 20).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn nll_direct_values() {
        let target = Frames::new(1, 2, vec![0.0, 0.0]).unwrap();
        let pred = Frames::new(1, 2, vec![1.0, 1.0]).unwrap();
        // stop term with a saturated correct logit is ~0
        let v = nll(&pred, &[60.0], &target, &[1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let perfect = nll(&target, &[60.0], &target, &[1.0]).unwrap();
        assert!(perfect < 1e-20);
        assert!(nll(&pred, &[0.0, 0.0], &target, &[1.0]).is_err());
    }

    #[test]
    fn nll_tape_matches_plain_and_gradient_is_residual() {
        let (dec, store) = tiny();
        let x = frames(5, 3);
        let mut tape = Tape::new();
        let c = tape.vector(vec![0.3, -0.2, 0.1, 0.5]);
        let trace = dec.decode_tape(&mut tape, &store, &[0, 4, 2], c, Feed::Teacher(&x)).unwrap();
        let loss = nll_tape(&mut tape, &trace, &x).unwrap();
        let out = trace.to_output(&tape);
        let plain = nll(&out.frames_hat, &out.stop_logits, &x, &stop_targets(5)).unwrap();
        assert!((tape.scalar(loss) - plain).abs() < 1e-12);
        let adj = tape.input_gradients(loss, &store);
        for (t, fv) in trace.frames.iter().enumerate() {
            let g = &adj[fv.index()];
            for (j, gj) in g.iter().enumerate() {
                let expect = out.frames_hat.row(t)[j] - x.row(t)[j];
                assert!((gj - expect).abs() < 1e-10);
            }
        }
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(loss, 1.0, &store, &mut grads, GroupMask::ALL);
        assert!(grads.norm(GroupMask::ALL) > 0.0);
    }
}
