//! Style-discriminator pretraining, the training loop, its JSON-lines log
//! and checkpoint resume.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylecycle_core::adversaries::{shuffle, Labelled, PretrainConfig, PretrainReport, StyleDiscriminator};
use stylecycle_core::corpus::{BatchIterator, Split, StyleRole};
use stylecycle_core::encoders::{compute_target_style, EncoderConfig};
use stylecycle_core::model::{Model, ModelConfig};
use stylecycle_core::objectives::LossBreakdown;
use stylecycle_core::params::Group;
use stylecycle_core::train::{style_spread, train_step, Optimizers, SourceItem, StepConfig, StepStats, TargetItem};

use crate::checkpoint::Segments;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Groups stored in a model checkpoint, in file order.
pub const MODEL_GROUPS: [Group; 4] = [Group::StyleEncoder, Group::SpeakerEncoder, Group::Decoder, Group::Discriminator];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_dis: bool,
    pub no_cyc: bool,
    pub no_adv: bool,
    pub gaussian_posterior: bool,
}

impl Ablation {
    pub fn named(name: &str) -> Option<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_dis" => a.no_dis = true,
            "no_cyc" => a.no_cyc = true,
            "no_adv" => a.no_adv = true,
            "gaussian" => a.gaussian_posterior = true,
            _ => return None,
        }
        Some(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZStarMode {
    /// Mean deterministic style over all target training utterances,
    /// recomputed at every epoch start.
    Centroid,
    /// Mean deterministic style over the current target batch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub step: StepConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between records in the metrics log; 0 disables them.
    pub eval_every: u64,
    pub z_star: ZStarMode,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            step: StepConfig::default(),
            batch_size: 4,
            max_steps: 20_000,
            seed: 1,
            eval_every: 500,
            z_star: ZStarMode::Centroid,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Model and step configuration with the ablation applied.
    pub fn effective(&self) -> (ModelConfig, StepConfig) {
        let mut model = self.model.clone();
        let mut step = self.step.clone();
        let a = &self.ablation;
        if a.no_dis {
            step.weights.gamma = 0.0;
        }
        if a.no_cyc {
            step.weights.lambda = 0.0;
        }
        if a.no_adv {
            step.weights.beta = 0.0;
            step.update_discriminator = false;
        }
        if a.gaussian_posterior {
            model.encoder.flow_steps = 0;
        }
        (model, step)
    }

    pub fn validate(&self) -> Result<()> {
        let (model, step) = self.effective();
        model.validate()?;
        step.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the trajectory (the step budget does
    /// not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.max_steps = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("serialisable")))
    }
}

/// Per-step record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_rec: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_dis: f64,
    pub l_cyc: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, l: &LossBreakdown) -> Self {
        Self {
            step,
            l_rec: l.l_rec,
            l_adv_d: l.l_adv_d,
            l_adv_g: l.l_adv_g,
            l_dis: l.l_dis,
            l_cyc: l.l_cyc,
            total: l.total,
        }
    }
}

/// Periodic record of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    /// Mean distance of target training styles to `z*`.
    pub z_spread: f64,
    pub generator_grad_norm: f64,
    pub discriminator_grad_norm: f64,
    /// Seconds of training so far, across resumes.
    pub wallclock: f64,
}

/// Utterances used for pretraining: a seeded, class-stratified fraction of
/// the training split, with the dev split held out.
pub fn pretrain_split(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Vec<(usize, bool)>, Vec<(usize, bool)>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must be in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for (role, is_target) in [(StyleRole::Source, false), (StyleRole::Target, true)] {
        let mut idx = corpus.select(Split::Train, role);
        shuffle(&mut idx, &mut rng);
        let k = ((idx.len() as f64 * fraction).round() as usize).max(1).min(idx.len());
        train.extend(idx[..k].iter().map(|i| (*i, is_target)));
    }
    let heldout = corpus
        .select(Split::Dev, StyleRole::Source)
        .into_iter()
        .map(|i| (i, false))
        .chain(corpus.select(Split::Dev, StyleRole::Target).into_iter().map(|i| (i, true)))
        .collect();
    Ok((train, heldout))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDiscriminatorReport {
    pub split_fraction: f64,
    #[serde(flatten)]
    pub pretrain: PretrainReport,
}

pub fn pretrain_style_discriminator(
    corpus: &Corpus,
    enc_cfg: &EncoderConfig,
    split_fraction: f64,
    cfg: &PretrainConfig,
) -> Result<(StyleDiscriminator, StyleDiscriminatorReport)> {
    let (train, heldout) = pretrain_split(corpus, split_fraction, cfg.seed)?;
    let label = |v: &[(usize, bool)]| -> Vec<Labelled<'_>> {
        v.iter().map(|(i, t)| Labelled { frames: &corpus.frames[*i], is_target: *t }).collect()
    };
    let (train_l, held_l) = (label(&train), label(&heldout));
    let (ds, report) = StyleDiscriminator::pretrain(enc_cfg, &train_l, &held_l, cfg)?;
    Ok((ds, StyleDiscriminatorReport { split_fraction, pretrain: report }))
}

pub fn save_style_discriminator(
    path: &Path,
    ds: &StyleDiscriminator,
    enc_cfg: &EncoderConfig,
    report: &StyleDiscriminatorReport,
) -> Result<()> {
    let mut s = Segments::default();
    s.put_f64s("params.style_discriminator", &ds.params().group_values(Group::StyleDiscriminator));
    s.put_json("encoder_config", enc_cfg);
    s.put_json("report", report);
    s.save(path)
}

/// Loads a pretrained style discriminator; fails with a gate error if its
/// recorded held-out accuracy is below its gate.
pub fn load_style_discriminator(path: &Path) -> Result<(StyleDiscriminator, StyleDiscriminatorReport)> {
    if !path.exists() {
        return Err(Error::Gate(format!("no pretrained style discriminator at {} (run pretrain-disc first)", path.display())));
    }
    let s = Segments::load(path)?;
    let cfg: EncoderConfig = s.get_json(path, "encoder_config")?;
    let report: StyleDiscriminatorReport = s.get_json(path, "report")?;
    let p = &report.pretrain;
    if p.heldout_accuracy < p.accuracy_gate {
        return Err(Error::Gate(format!(
            "style discriminator accuracy {:.4} below gate {:.2}",
            p.heldout_accuracy, p.accuracy_gate
        )));
    }
    let ds = StyleDiscriminator::from_values(&cfg, &s.get_f64s(path, "params.style_discriminator")?)?;
    Ok((ds, report))
}

pub struct Trainer<'c> {
    corpus: &'c Corpus,
    pub cfg: TrainConfig,
    pub step_cfg: StepConfig,
    pub model: Model,
    pub opt: Optimizers,
    pub iter: BatchIterator,
    rng: ChaCha8Rng,
    pub step: u64,
    pub z_star: Vec<f64>,
    p_style: Vec<f64>,
    ds_values: Vec<f64>,
    ds_config: EncoderConfig,
    target_train: Vec<usize>,
    elapsed_before: f64,
    started: Instant,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, ds: &StyleDiscriminator, ds_config: &EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !ds.is_pretrained() {
            return Err(stylecycle_core::Error::NotPretrained.into());
        }
        let (model_cfg, step_cfg) = cfg.effective();
        if model_cfg.encoder.frame_dim != corpus.manifest.frame_dim
            || model_cfg.decoder.vocab_size != corpus.manifest.vocab_size
        {
            return Err(Error::Config("model frame_dim/vocab_size do not match the corpus".into()));
        }
        let model = Model::new(&model_cfg, cfg.seed)?;
        let opt = Optimizers::new(&model, &step_cfg);
        let source = corpus.select(Split::Train, StyleRole::Source);
        let target_train = corpus.select(Split::Train, StyleRole::Target);
        let iter = BatchIterator::new(source.clone(), target_train.clone(), cfg.batch_size, cfg.seed)?;
        let mut p_style = vec![f64::NAN; corpus.frames.len()];
        for &i in &source {
            p_style[i] = ds.style_probability(&corpus.frames[i])?;
        }
        let z_star = vec![0.0; model.z_dim()];
        Ok(Self {
            corpus,
            cfg: cfg.clone(),
            step_cfg,
            model,
            opt,
            iter,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11),
            step: 0,
            z_star,
            p_style,
            ds_values: ds.params().group_values(Group::StyleDiscriminator),
            ds_config: ds_config.clone(),
            target_train,
            elapsed_before: 0.0,
            started: Instant::now(),
        })
    }

    pub fn wallclock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    fn centroid(&self, idx: &[usize]) -> Result<Vec<f64>> {
        Ok(compute_target_style(&self.model.style, &self.model.store, idx.iter().map(|&i| &self.corpus.frames[i]))?)
    }

    /// Runs one step and returns its log record.
    pub fn step_once(&mut self) -> Result<(LogRecord, StepStats, bool)> {
        let batch = self.iter.next_batch();
        match self.cfg.z_star {
            ZStarMode::Centroid if batch.new_epoch => self.z_star = self.centroid(&self.target_train)?,
            ZStarMode::PerBatch => self.z_star = self.centroid(&batch.target)?,
            _ => {}
        }
        let c = self.corpus;
        let source: Vec<SourceItem<'_>> = batch
            .source
            .iter()
            .map(|&i| SourceItem { tokens: c.tokens(i), frames: &c.frames[i], p_style: self.p_style[i] })
            .collect();
        let target: Vec<TargetItem<'_>> =
            batch.target.iter().map(|&i| TargetItem { tokens: c.tokens(i), frames: &c.frames[i] }).collect();
        let stats = train_step(
            &mut self.model,
            &mut self.opt,
            &self.step_cfg,
            &source,
            &target,
            &self.z_star,
            &mut self.rng,
            self.step + 1,
        )?;
        self.step += 1;
        Ok((LogRecord::new(self.step, &stats.losses), stats, batch.new_epoch))
    }

    /// Trains until `until` steps have been taken, appending one JSON line per
    /// step to `log` and periodic records to `metrics`.
    pub fn run(&mut self, until: u64, log: &mut dyn Write, metrics: &mut dyn Write) -> Result<()> {
        while self.step < until {
            let (rec, stats, _) = self.step_once()?;
            writeln!(log, "{}", serde_json::to_string(&rec).expect("serialisable")).map_err(|e| Error::io("<log>", e))?;
            if self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0 {
                let m = MetricsRecord {
                    step: self.step,
                    epoch: self.iter.source.epoch,
                    z_spread: self.z_spread()?,
                    generator_grad_norm: stats.generator_grad_norm,
                    discriminator_grad_norm: stats.discriminator_grad_norm,
                    wallclock: self.wallclock(),
                };
                writeln!(metrics, "{}", serde_json::to_string(&m).expect("serialisable"))
                    .map_err(|e| Error::io("<metrics>", e))?;
                log::info!(
                    "step {} total {:.3} rec {:.3} adv_d {:.4} adv_g {:.4} dis {:.4} cyc {:.3} spread {:.4}",
                    rec.step,
                    rec.total,
                    rec.l_rec,
                    rec.l_adv_d,
                    rec.l_adv_g,
                    rec.l_dis,
                    rec.l_cyc,
                    m.z_spread
                );
            }
        }
        log.flush().map_err(|e| Error::io("<log>", e))?;
        Ok(())
    }

    pub fn z_spread(&self) -> Result<f64> {
        let frames = self.target_train.iter().map(|&i| &self.corpus.frames[i]);
        Ok(style_spread(&self.model, frames, &self.z_star)?)
    }

    pub fn to_segments(&self) -> Segments {
        let mut s = Segments::default();
        s.put_json("config", &self.cfg);
        s.put_json(
            "meta",
            &CheckpointMeta {
                step: self.step,
                config_hash: self.cfg.hash(),
                corpus_hash: self.corpus.hash.clone(),
                wallclock: self.wallclock(),
                generator_adam_step: self.opt.generator.step,
                discriminator_adam_step: self.opt.discriminator.step,
            },
        );
        for g in MODEL_GROUPS {
            s.put_f64s(&format!("params.{}", g.name()), &self.model.store.group_values(g));
        }
        s.put_f64s("params.style_discriminator", &self.ds_values);
        s.put_json("style_discriminator_config", &self.ds_config);
        for (name, a) in [("generator", &self.opt.generator), ("discriminator", &self.opt.discriminator)] {
            s.put_f64s(&format!("adam.{name}.m"), &a.m);
            s.put_f64s(&format!("adam.{name}.v"), &a.v);
        }
        s.put_f64s("z_star", &self.z_star);
        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        s.put("rng", rng);
        s.put_json("iterator", &self.iter);
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_segments().save(path)
    }

    /// Restores a trainer from a checkpoint written with the same
    /// configuration and corpus.
    pub fn resume(corpus: &'c Corpus, cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let s = Segments::load(path)?;
        let meta: CheckpointMeta = s.get_json(path, "meta")?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!("{}: checkpoint was written with a different configuration", path.display())));
        }
        if meta.corpus_hash != corpus.hash {
            return Err(Error::format(path, "checkpoint was trained on a different corpus"));
        }
        let ds_cfg: EncoderConfig = s.get_json(path, "style_discriminator_config")?;
        let ds = StyleDiscriminator::from_values(&ds_cfg, &s.get_f64s(path, "params.style_discriminator")?)?;
        let mut t = Trainer::new(corpus, &ds, &ds_cfg, cfg)?;
        for g in MODEL_GROUPS {
            t.model.store.set_group_values(g, &s.get_f64s(path, &format!("params.{}", g.name()))?)?;
        }
        let n = t.model.store.len();
        for (name, a, step) in [
            ("generator", &mut t.opt.generator, meta.generator_adam_step),
            ("discriminator", &mut t.opt.discriminator, meta.discriminator_adam_step),
        ] {
            a.m = s.get_f64s(path, &format!("adam.{name}.m"))?;
            a.v = s.get_f64s(path, &format!("adam.{name}.v"))?;
            a.step = step;
            if a.m.len() != n || a.v.len() != n {
                return Err(Error::format(path, format!("optimizer state {name} has the wrong size")));
            }
        }
        t.z_star = s.get_f64s(path, "z_star")?;
        let rng = s.get(path, "rng")?;
        if rng.len() != 32 + 8 + 16 {
            return Err(Error::format(path, "rng segment has the wrong size"));
        }
        let mut r = ChaCha8Rng::from_seed(rng[..32].try_into().unwrap());
        r.set_stream(u64::from_le_bytes(rng[32..40].try_into().unwrap()));
        r.set_word_pos(u128::from_le_bytes(rng[40..56].try_into().unwrap()));
        t.rng = r;
        t.iter = s.get_json(path, "iterator")?;
        t.step = meta.step;
        t.elapsed_before = meta.wallclock;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
    pub corpus_hash: String,
    pub wallclock: f64,
    pub generator_adam_step: u64,
    pub discriminator_adam_step: u64,
}

/// A trained model restored from a checkpoint for inference.
pub struct TrainedModel {
    pub cfg: TrainConfig,
    pub model: Model,
    pub z_star: Vec<f64>,
    pub step: u64,
    /// Training seconds up to the checkpoint.
    pub wallclock: f64,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let s = Segments::load(path)?;
        let cfg: TrainConfig = s.get_json(path, "config")?;
        let meta: CheckpointMeta = s.get_json(path, "meta")?;
        let (model_cfg, _) = cfg.effective();
        let mut model = Model::new(&model_cfg, cfg.seed)?;
        for g in MODEL_GROUPS {
            model.store.set_group_values(g, &s.get_f64s(path, &format!("params.{}", g.name()))?)?;
        }
        let z_star = s.get_f64s(path, "z_star")?;
        if z_star.len() != model.z_dim() {
            return Err(Error::format(path, "z_star has the wrong width"));
        }
        Ok(Self { cfg, model, z_star, step: meta.step, wallclock: meta.wallclock })
    }
}

fn open_log(path: &Path, keep_steps: Option<u64>) -> Result<BufWriter<fs::File>> {
    // on resume, drop lines past the checkpoint so the file matches an
    // uninterrupted run
    let kept: String = match keep_steps {
        Some(keep) => fs::read_to_string(path)
            .unwrap_or_default()
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                    .is_some_and(|s| s <= keep)
            })
            .map(|l| format!("{l}\n"))
            .collect(),
        None => String::new(),
    };
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    let f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Trains into `dir` up to `cfg.max_steps`, checkpointing every
/// `checkpoint_every` steps. With `resume` the run continues from the
/// checkpoint in `dir`.
pub fn train_run<'c>(
    corpus: &'c Corpus,
    ds: &StyleDiscriminator,
    ds_config: &EncoderConfig,
    cfg: &TrainConfig,
    dir: &Path,
    checkpoint_every: u64,
    resume: bool,
) -> Result<Trainer<'c>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut t = if resume { Trainer::resume(corpus, cfg, &ckpt)? } else { Trainer::new(corpus, ds, ds_config, cfg)? };
    let keep = resume.then_some(t.step);
    let mut log = open_log(&dir.join(LOG_FILE), keep)?;
    let mut metrics = open_log(&dir.join(METRICS_FILE), keep)?;
    let every = checkpoint_every.max(1);
    while t.step < cfg.max_steps {
        let until = ((t.step / every + 1) * every).min(cfg.max_steps);
        t.run(until, &mut log, &mut metrics)?;
        metrics.flush().map_err(|e| Error::io(dir, e))?;
        t.save(&ckpt)?;
    }
    if !ckpt.exists() {
        t.save(&ckpt)?;
    }
    Ok(t)
}
