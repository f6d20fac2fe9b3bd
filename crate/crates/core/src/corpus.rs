//! Disjoint multi-style corpora: manifest types and validation, the
//! synthetic generator and the paired batch iterator.
//!
//! Synthetic frames live in a log-energy domain, so the multiplicative
//! composition of token pattern, speaker envelope and style contour becomes a
//! sum:
//!
//! `x[t, f] = pattern[token(t)][f] + scale · envelope[f] + contour(t / (T - 1)) + noise`
//!
//! Token patterns and envelopes have zero mean over `f`, so the per-frame
//! mean carries the style contour and the time-averaged spectrum carries the
//! speaker.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversaries::shuffle;
use crate::error::{Error, Result};
use crate::frames::Frames;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contour {
    Flat,
    Rising,
    Falling,
    Periodic,
}

impl Contour {
    /// Contour value at relative position `u ∈ [0, 1]`.
    pub fn eval(self, u: f64, rate: f64, depth: f64) -> f64 {
        match self {
            Contour::Flat => 0.0,
            Contour::Rising => depth * rate * (2.0 * u - 1.0),
            Contour::Falling => -depth * rate * (2.0 * u - 1.0),
            Contour::Periodic => depth * libm::sin(2.0 * core::f64::consts::PI * rate * u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleRole {
    Source,
    Target,
    /// Held out of training; appears only in the test split.
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub style_id: String,
    pub speaker_id: String,
    pub role: StyleRole,
    pub duration_multiplier: f64,
    pub energy_contour: Contour,
    pub contour_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerSpec {
    pub speaker_id: String,
    pub base_envelope: Vec<f64>,
    pub envelope_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceMeta {
    pub id: String,
    pub speaker_id: String,
    pub style_id: String,
    pub tokens: Vec<usize>,
    pub num_frames: usize,
    pub split: Split,
    /// Frame file, relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub styles: Vec<StyleSpec>,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<UtteranceMeta>,
    pub target_style_id: String,
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn style(&self, id: &str) -> Option<&StyleSpec> {
        self.styles.iter().find(|s| s.style_id == id)
    }

    pub fn role_of(&self, style_id: &str) -> Option<StyleRole> {
        self.style(style_id).map(|s| s.role)
    }

    pub fn unseen_style_ids(&self) -> Vec<&str> {
        self.styles.iter().filter(|s| s.role == StyleRole::Unseen).map(|s| s.style_id.as_str()).collect()
    }

    /// Indices of utterances in `split` whose style has `role`.
    pub fn select(&self, split: Split, role: StyleRole) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == split && self.role_of(&u.style_id) == Some(role))
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural invariants that do not need the frame files.
    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Data("frame_dim and vocab_size must be positive".into()));
        }
        check_disjoint(&self.styles, &self.speakers)?;
        let targets = self.styles.iter().filter(|s| s.role == StyleRole::Target).count();
        if targets != 1 {
            return Err(Error::Data(format!("exactly one target style required, found {targets}")));
        }
        match self.style(&self.target_style_id) {
            Some(s) if s.role == StyleRole::Target => {}
            _ => return Err(Error::Data(format!("target_style_id {} is not the target style", self.target_style_id))),
        }
        for sp in &self.speakers {
            if sp.base_envelope.len() != self.frame_dim {
                return Err(Error::Data(format!("speaker {} envelope has {} values", sp.speaker_id, sp.base_envelope.len())));
            }
        }
        let mut ids = BTreeMap::new();
        for u in &self.utterances {
            if ids.insert(u.id.as_str(), ()).is_some() {
                return Err(Error::Data(format!("duplicate utterance id {}", u.id)));
            }
            let style = self.style(&u.style_id).ok_or_else(|| Error::Data(format!("{}: unknown style {}", u.id, u.style_id)))?;
            if style.speaker_id != u.speaker_id {
                return Err(Error::Data(format!(
                    "{}: speaker {} recorded style {} which belongs to speaker {}",
                    u.id, u.speaker_id, u.style_id, style.speaker_id
                )));
            }
            if style.role == StyleRole::Unseen && u.split != Split::Test {
                return Err(Error::Data(format!("{}: unseen style outside the test split", u.id)));
            }
            if u.num_frames == 0 {
                return Err(Error::Data(format!("{}: no frames", u.id)));
            }
            if u.tokens.is_empty() {
                return Err(Error::Data(format!("{}: no tokens", u.id)));
            }
            if let Some(t) = u.tokens.iter().find(|t| **t >= self.vocab_size) {
                return Err(Error::Data(format!("{}: token {} out of vocabulary {}", u.id, t, self.vocab_size)));
            }
        }
        Ok(())
    }
}

/// Each style has exactly one speaker and each speaker exactly one style.
pub fn check_disjoint(styles: &[StyleSpec], speakers: &[SpeakerSpec]) -> Result<()> {
    let mut by_style = BTreeMap::new();
    let mut by_speaker = BTreeMap::new();
    for s in styles {
        if by_style.insert(s.style_id.as_str(), ()).is_some() {
            return Err(Error::Data(format!("duplicate style id {}", s.style_id)));
        }
        if let Some(other) = by_speaker.insert(s.speaker_id.as_str(), s.style_id.as_str()) {
            return Err(Error::Data(format!(
                "disjointness violated: speaker {} has styles {} and {}",
                s.speaker_id, other, s.style_id
            )));
        }
    }
    let mut declared = BTreeMap::new();
    for sp in speakers {
        if declared.insert(sp.speaker_id.as_str(), ()).is_some() {
            return Err(Error::Data(format!("duplicate speaker id {}", sp.speaker_id)));
        }
        if !by_speaker.contains_key(sp.speaker_id.as_str()) {
            return Err(Error::Data(format!("disjointness violated: speaker {} has no style", sp.speaker_id)));
        }
    }
    if let Some(s) = styles.iter().find(|s| !declared.contains_key(s.speaker_id.as_str())) {
        return Err(Error::Data(format!("style {} references undeclared speaker {}", s.style_id, s.speaker_id)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleEntry {
    #[serde(flatten)]
    pub spec: StyleSpec,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frames_per_token: f64,
    /// Relative uniform jitter on each token's duration.
    pub duration_jitter: f64,
    pub snr_db: f64,
    pub contour_depth: f64,
    /// RMS of the token patterns.
    pub pattern_scale: f64,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    /// Two styles must differ by at least this much in duration or rate if
    /// they share a contour shape.
    pub style_margin: f64,
    pub styles: Vec<StyleEntry>,
    pub speakers: Vec<SpeakerSpec>,
}

/// Smooth, zero-mean, unit-RMS envelope drawn from `seed`.
pub fn smooth_envelope(frame_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<(f64, f64)> = (1..=3)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let p = unit(&mut rng) * 2.0 * core::f64::consts::PI;
            (a, p)
        })
        .collect();
    let mut env: Vec<f64> = (0..frame_dim)
        .map(|f| {
            let x = f as f64 / (frame_dim.max(2) - 1) as f64;
            coef.iter().enumerate().map(|(j, (a, p))| a * libm::cos(core::f64::consts::PI * (j + 1) as f64 * x + p)).sum()
        })
        .collect();
    normalize_zero_mean_unit_rms(&mut env);
    env
}

fn normalize_zero_mean_unit_rms(v: &mut [f64]) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= m);
    let rms = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() / n);
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

fn unit(rng: &mut dyn RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

impl GeneratorConfig {
    /// Four source styles, one target and one unseen style, 100 utterances
    /// each, one speaker per style.
    pub fn default_corpus(seed: u64) -> Self {
        let table: [(&str, StyleRole, f64, Contour, f64); 6] = [
            ("reading", StyleRole::Source, 1.0, Contour::Flat, 0.0),
            ("broadcast", StyleRole::Source, 0.85, Contour::Rising, 1.0),
            ("talking", StyleRole::Source, 1.1, Contour::Periodic, 1.0),
            ("story", StyleRole::Source, 1.25, Contour::Periodic, 2.0),
            ("service", StyleRole::Target, 1.0, Contour::Falling, 1.0),
            ("lively", StyleRole::Unseen, 0.95, Contour::Periodic, 1.5),
        ];
        let frame_dim = 32;
        let mut styles = Vec::new();
        let mut speakers = Vec::new();
        for (i, (id, role, dur, contour, rate)) in table.iter().enumerate() {
            let speaker_id = format!("spk-{}", (b'a' + i as u8) as char);
            styles.push(StyleEntry {
                spec: StyleSpec {
                    style_id: id.to_string(),
                    speaker_id: speaker_id.clone(),
                    role: *role,
                    duration_multiplier: *dur,
                    energy_contour: *contour,
                    contour_rate: *rate,
                },
                utterances: 100,
            });
            speakers.push(SpeakerSpec {
                speaker_id,
                base_envelope: smooth_envelope(frame_dim, 0x5eed_0000 + i as u64),
                envelope_scale: 1.0,
            });
        }
        Self {
            seed,
            frame_dim,
            vocab_size: 24,
            min_tokens: 6,
            max_tokens: 12,
            frames_per_token: 3.0,
            duration_jitter: 0.15,
            snr_db: 20.0,
            contour_depth: 1.5,
            pattern_scale: 1.0,
            train_fraction: 0.8,
            dev_fraction: 0.1,
            style_margin: 0.1,
            styles,
            speakers,
        }
    }

    /// Data-scarce variant: the target style keeps about a sixth of its
    /// utterances.
    pub fn scarce_target(mut self) -> Self {
        for s in self.styles.iter_mut().filter(|s| s.spec.role == StyleRole::Target) {
            s.utterances = (s.utterances / 6).max(10);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.frame_dim == 0 || self.vocab_size == 0 {
            return cfg("frame_dim and vocab_size must be positive".into());
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return cfg(format!("token range [{}, {}] is invalid", self.min_tokens, self.max_tokens));
        }
        if !(self.frames_per_token > 0.0) || !(0.0..1.0).contains(&self.duration_jitter) {
            return cfg("frames_per_token must be positive and duration_jitter in [0, 1)".into());
        }
        if !(self.train_fraction > 0.0 && self.dev_fraction > 0.0 && self.train_fraction + self.dev_fraction < 1.0) {
            return cfg("split fractions must be positive and leave room for a test split".into());
        }
        if !self.snr_db.is_finite() || !(self.contour_depth >= 0.0) || !(self.pattern_scale > 0.0) {
            return cfg("snr_db, contour_depth and pattern_scale are out of range".into());
        }
        let specs: Vec<StyleSpec> = self.styles.iter().map(|s| s.spec.clone()).collect();
        check_disjoint(&specs, &self.speakers)?;
        let count = |r: StyleRole| self.styles.iter().filter(|s| s.spec.role == r).count();
        if count(StyleRole::Source) < 2 {
            return cfg("at least two source styles are required".into());
        }
        if count(StyleRole::Target) != 1 {
            return cfg("exactly one target style is required".into());
        }
        if count(StyleRole::Unseen) < 1 {
            return cfg("at least one unseen style is required".into());
        }
        for s in &self.styles {
            if s.utterances < 10 {
                return cfg(format!("style {} needs at least 10 utterances, has {}", s.spec.style_id, s.utterances));
            }
            if !(s.spec.duration_multiplier > 0.0) || !s.spec.contour_rate.is_finite() {
                return cfg(format!("style {} has invalid duration or rate", s.spec.style_id));
            }
        }
        for sp in &self.speakers {
            if sp.base_envelope.len() != self.frame_dim || !(sp.envelope_scale > 0.0) {
                return cfg(format!("speaker {} envelope must have frame_dim values and positive scale", sp.speaker_id));
            }
        }
        for (i, a) in self.styles.iter().enumerate() {
            for b in &self.styles[i + 1..] {
                let (a, b) = (&a.spec, &b.spec);
                let distinct = a.energy_contour != b.energy_contour
                    || libm::fabs(a.duration_multiplier - b.duration_multiplier) >= self.style_margin
                    || libm::fabs(a.contour_rate - b.contour_rate) >= self.style_margin;
                if !distinct {
                    return cfg(format!("styles {} and {} differ by less than the margin", a.style_id, b.style_id));
                }
            }
        }
        Ok(())
    }
}

/// A generated utterance with its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub meta: UtteranceMeta,
    pub frames: Frames,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn token_patterns(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x70c3));
    (0..cfg.vocab_size)
        .map(|_| {
            let mut p: Vec<f64> = (0..cfg.frame_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize_zero_mean_unit_rms(&mut p);
            p.iter_mut().for_each(|x| *x *= cfg.pattern_scale);
            p
        })
        .collect()
}

/// Frames for one utterance from its own seed.
pub fn synthesize(
    cfg: &GeneratorConfig,
    patterns: &[Vec<f64>],
    style: &StyleSpec,
    speaker: &SpeakerSpec,
    seed: u64,
) -> (Vec<usize>, Frames) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (cfg.max_tokens - cfg.min_tokens + 1) as u64;
    let len = cfg.min_tokens + (rng.next_u64() % span) as usize;
    let tokens: Vec<usize> = (0..len).map(|_| (rng.next_u64() % cfg.vocab_size as u64) as usize).collect();
    let mut per_frame = Vec::new();
    for &t in &tokens {
        let jitter = 1.0 + cfg.duration_jitter * (2.0 * unit(&mut rng) - 1.0);
        let d = libm::round(cfg.frames_per_token * style.duration_multiplier * jitter).max(1.0) as usize;
        per_frame.extend(core::iter::repeat_n(t, d));
    }
    let n = per_frame.len();
    let f = cfg.frame_dim;
    let mut data = Vec::with_capacity(n * f);
    for (i, &tok) in per_frame.iter().enumerate() {
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let c = style.energy_contour.eval(u, style.contour_rate, cfg.contour_depth);
        for k in 0..f {
            data.push(patterns[tok][k] + speaker.envelope_scale * speaker.base_envelope[k] + c);
        }
    }
    let power = data.iter().map(|x| x * x).sum::<f64>() / data.len() as f64;
    let sigma = libm::sqrt(power / libm::pow(10.0, cfg.snr_db / 10.0));
    for x in data.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *x += sigma * e;
    }
    (tokens, Frames::new(n, f, data).expect("synthetic frames are finite"))
}

/// Generates the whole corpus. Frame file names are `frames/<id>.bin`.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<(CorpusManifest, Vec<Utterance>)> {
    cfg.validate()?;
    let patterns = token_patterns(cfg);
    let mut utterances = Vec::new();
    for (si, entry) in cfg.styles.iter().enumerate() {
        let style = &entry.spec;
        let speaker = cfg.speakers.iter().find(|s| s.speaker_id == style.speaker_id).expect("validated");
        let mut order: Vec<usize> = (0..entry.utterances).collect();
        let mut split_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x5_0000 + si as u64));
        shuffle(&mut order, &mut split_rng);
        let n_train = libm::round(entry.utterances as f64 * cfg.train_fraction) as usize;
        let n_dev = libm::round(entry.utterances as f64 * cfg.dev_fraction) as usize;
        let mut split_of = vec![Split::Test; entry.utterances];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if style.role == StyleRole::Unseen {
                Split::Test
            } else if rank < n_train {
                Split::Train
            } else if rank < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
        for (ui, split) in split_of.into_iter().enumerate() {
            let seed = mix(mix(cfg.seed, si as u64 + 1), ui as u64 + 1);
            let (tokens, frames) = synthesize(cfg, &patterns, style, speaker, seed);
            let id = format!("{}-{:04}", style.style_id, ui);
            utterances.push(Utterance {
                meta: UtteranceMeta {
                    file: format!("frames/{id}.bin"),
                    id,
                    speaker_id: style.speaker_id.clone(),
                    style_id: style.style_id.clone(),
                    tokens,
                    num_frames: frames.num_frames(),
                    split,
                },
                frames,
            });
        }
    }
    let target = cfg.styles.iter().find(|s| s.spec.role == StyleRole::Target).expect("validated");
    let manifest = CorpusManifest {
        styles: cfg.styles.iter().map(|s| s.spec.clone()).collect(),
        speakers: cfg.speakers.clone(),
        utterances: utterances.iter().map(|u| u.meta.clone()).collect(),
        target_style_id: target.spec.style_id.clone(),
        frame_dim: cfg.frame_dim,
        vocab_size: cfg.vocab_size,
        seed: cfg.seed,
    };
    manifest.validate()?;
    Ok((manifest, utterances))
}

/// Shuffled cycle over a fixed index set; reshuffles when fewer than a full
/// batch remain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycler {
    pub order: Vec<usize>,
    pub pos: usize,
    pub epoch: u64,
}

/// Paired source/target batches, deterministic in the seed. Serialisable so
/// training can resume mid-epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub batch_size: usize,
    pub seed: u64,
    pub draws: u64,
    pub source: Cycler,
    pub target: Cycler,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// True when this batch starts a new source epoch.
    pub new_epoch: bool,
}

impl BatchIterator {
    pub fn new(source: Vec<usize>, target: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data("both domains need training utterances".into()));
        }
        if source.len() < batch_size || target.len() < batch_size {
            return Err(Error::Data(format!(
                "batch_size {} exceeds a domain ({} source, {} target)",
                batch_size,
                source.len(),
                target.len()
            )));
        }
        let mk = |order: Vec<usize>| Cycler { pos: order.len(), order, epoch: 0 };
        Ok(Self { batch_size, seed, draws: 0, source: mk(source), target: mk(target) })
    }

    fn reshuffle(seed: u64, domain: u64, c: &mut Cycler) {
        c.order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, domain), c.epoch));
        shuffle(&mut c.order, &mut rng);
        c.pos = 0;
        c.epoch += 1;
    }

    fn take(seed: u64, domain: u64, c: &mut Cycler, n: usize) -> (Vec<usize>, bool) {
        let mut fresh = false;
        if c.order.len() - c.pos < n {
            Self::reshuffle(seed, domain, c);
            fresh = true;
        }
        let out = c.order[c.pos..c.pos + n].to_vec();
        c.pos += n;
        (out, fresh)
    }

    pub fn next_batch(&mut self) -> Batch {
        let (source, new_epoch) = Self::take(self.seed, 1, &mut self.source, self.batch_size);
        let (target, _) = Self::take(self.seed, 2, &mut self.target, self.batch_size);
        self.draws += 1;
        Batch { source, target, new_epoch }
    }

    /// Steps per source epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.source.order.len() / self.batch_size
    }
}
