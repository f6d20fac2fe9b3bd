#![allow(dead_code)]

use std::path::Path;

use stylecycle::corpus::{generate_to, Corpus};
use stylecycle::trainer::{pretrain_style_discriminator, TrainConfig};
use stylecycle_core::adversaries::{PretrainConfig, StyleDiscriminator};
use stylecycle_core::corpus::GeneratorConfig;

/// Default styles with `per_style` utterances each.
pub fn small_generator(seed: u64, per_style: usize) -> GeneratorConfig {
    let mut g = GeneratorConfig::default_corpus(seed);
    for s in &mut g.styles {
        s.utterances = per_style;
    }
    g
}

pub fn small_corpus(dir: &Path, seed: u64) -> Corpus {
    generate_to(dir, &small_generator(seed, 20)).unwrap();
    Corpus::load(dir).unwrap()
}

pub fn style_discriminator(corpus: &Corpus, cfg: &TrainConfig) -> StyleDiscriminator {
    let pre = PretrainConfig { accuracy_gate: 0.0, max_epochs: 3, ..PretrainConfig::default() };
    pretrain_style_discriminator(corpus, &cfg.model.encoder, 0.5, &pre).unwrap().0
}

pub fn short_config(steps: u64) -> TrainConfig {
    TrainConfig { max_steps: steps, batch_size: 2, eval_every: 5, ..TrainConfig::default() }
}
