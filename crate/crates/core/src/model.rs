//! The trainable system: style encoder, speaker encoder, decoder and the
//! adversarial discriminator sharing one parameter store.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adversaries::{Discriminator, DiscriminatorConfig};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput, Feed};
use crate::encoders::{EncoderConfig, SpeakerEncoder, SpeakerVector, StyleEncoder};
use crate::error::{Error, Result};
use crate::frames::Frames;
use crate::params::ParamStore;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let decoder = DecoderConfig { cond_dim: encoder.r_dim + encoder.z_dim, ..Default::default() };
        Self { encoder, decoder, discriminator: DiscriminatorConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let e = &self.encoder;
        if self.decoder.cond_dim != e.r_dim + e.z_dim {
            return Err(Error::Config(format!(
                "decoder cond_dim {} must equal r_dim + z_dim = {}",
                self.decoder.cond_dim,
                e.r_dim + e.z_dim
            )));
        }
        if self.decoder.frame_dim != e.frame_dim || self.discriminator.frame_dim != e.frame_dim {
            return Err(Error::Config("encoder, decoder and discriminator frame_dim differ".into()));
        }
        let d = &self.decoder;
        if d.speaker_projection > e.r_dim {
            return Err(Error::Config(format!(
                "speaker_projection {} exceeds r_dim {}",
                d.speaker_projection, e.r_dim
            )));
        }
        if d.vocab_size == 0 || d.embed_dim == 0 || d.text_units == 0 || d.decoder_units == 0 || d.attention_dim == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.discriminator.channels.is_empty() || self.discriminator.channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub style: StyleEncoder,
    pub speaker: SpeakerEncoder,
    pub decoder: Decoder,
    pub disc: Discriminator,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let style = StyleEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let speaker = SpeakerEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let decoder = Decoder::new(&mut store, &cfg.decoder, &mut rng);
        let disc = Discriminator::new(&mut store, &cfg.discriminator, &mut rng);
        Ok(Self { cfg: cfg.clone(), store, style, speaker, decoder, disc })
    }

    pub fn z_dim(&self) -> usize {
        self.cfg.encoder.z_dim
    }

    pub fn min_frames(&self) -> usize {
        self.style.reference().min_frames()
    }

    pub fn speaker_vector(&self, frames: &Frames) -> Result<SpeakerVector> {
        self.speaker.encode_speaker(&self.store, frames)
    }

    /// Free-running transfer of an utterance to style `z`: the speaker comes
    /// from `frames`, the text from `tokens`.
    pub fn transfer(&self, tokens: &[usize], frames: &Frames, z: &[f64], max_frames: usize) -> Result<DecoderOutput> {
        let cond = self.conditioning(frames, z)?;
        self.decoder.decode_free_running(&self.store, tokens, &cond, max_frames)
    }

    /// Transfer generated for exactly `n` frames, ignoring the stop head.
    pub fn transfer_fixed(&self, tokens: &[usize], frames: &Frames, z: &[f64], n: usize) -> Result<Frames> {
        let cond = self.conditioning(frames, z)?;
        let mut tape = Tape::new();
        let c = tape.vector(cond);
        let trace = self.decoder.decode_tape(&mut tape, &self.store, tokens, c, Feed::FixedLength(n))?;
        Ok(trace.to_output(&tape).frames_hat)
    }

    /// Teacher-forced reconstruction with the utterance's own speaker and
    /// deterministic style.
    pub fn reconstruct(&self, tokens: &[usize], frames: &Frames) -> Result<Frames> {
        let z = self.style.deterministic_style(&self.store, frames)?;
        let cond = self.conditioning(frames, &z)?;
        let mut tape = Tape::new();
        let c = tape.vector(cond);
        let trace = self.decoder.decode_tape(&mut tape, &self.store, tokens, c, Feed::Teacher(frames))?;
        Ok(trace.to_output(&tape).frames_hat)
    }

    fn conditioning(&self, frames: &Frames, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.z_dim() {
            return Err(Error::Shape(format!("style vector has {} dims, expected {}", z.len(), self.z_dim())));
        }
        let mut cond = self.speaker_vector(frames)?.0;
        cond.extend_from_slice(z);
        Ok(cond)
    }
}
