mod support;

use std::fs;

use stylecycle::checkpoint::Segments;
use stylecycle::trainer::{Trainer, TrainedModel, LOG_FILE};
use stylecycle::{trainer, Category};
use stylecycle_core::objectives::LossWeights;

fn records(t: &mut Trainer<'_>, until: u64) -> Vec<serde_json::Value> {
    let (mut log, mut metrics) = (Vec::new(), Vec::new());
    t.run(until, &mut log, &mut metrics).unwrap();
    String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 5);
    let cfg = support::short_config(8);
    let ds = support::style_discriminator(&corpus, &cfg);
    let a = records(&mut Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap(), 8);
    let b = records(&mut Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap(), 8);
    assert_eq!(a.len(), 8);
    assert_eq!(a, b);
    let other = support::short_config(8);
    let other = trainer::TrainConfig { seed: 2, ..other };
    let c = records(&mut Trainer::new(&corpus, &ds, &other.model.encoder, &other).unwrap(), 8);
    assert_ne!(a, c);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(&dir.path().join("corpus"), 5);
    // small batches cross an epoch boundary inside the run
    let cfg = support::short_config(10);
    let ds = support::style_discriminator(&corpus, &cfg);
    let mut full = Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap();
    let expected = records(&mut full, 10);

    let ckpt = dir.path().join("run.ckpt");
    let mut first = Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap();
    let mut got = records(&mut first, 4);
    first.save(&ckpt).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&corpus, &cfg, &ckpt).unwrap();
    assert_eq!(resumed.step, 4);
    got.extend(records(&mut resumed, 10));
    assert_eq!(got, expected);
    assert_eq!(resumed.model.store.data(), full.model.store.data());
    assert_eq!(resumed.z_star, full.z_star);
}

#[test]
fn train_run_resume_rewrites_log_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(&dir.path().join("corpus"), 6);
    let cfg = support::short_config(6);
    let ds = support::style_discriminator(&corpus, &cfg);
    let enc = cfg.model.encoder.clone();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    trainer::train_run(&corpus, &ds, &enc, &cfg, &a, 100, false).unwrap();
    let short = trainer::TrainConfig { max_steps: 3, ..cfg.clone() };
    trainer::train_run(&corpus, &ds, &enc, &short, &b, 100, false).unwrap();
    trainer::train_run(&corpus, &ds, &enc, &cfg, &b, 100, true).unwrap();
    assert_eq!(fs::read(a.join(LOG_FILE)).unwrap(), fs::read(b.join(LOG_FILE)).unwrap());
    let m = TrainedModel::load(&b.join(trainer::CHECKPOINT_FILE)).unwrap();
    assert_eq!(m.step, 6);
}

#[test]
fn zero_weights_remove_terms_from_totals() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 5);
    let base = support::short_config(4);
    let ds = support::style_discriminator(&corpus, &base);
    for k in 0..4 {
        let mut cfg = base.clone();
        let w = &mut cfg.step.weights;
        match k {
            0 => w.alpha = 0.0,
            1 => w.beta = 0.0,
            2 => w.gamma = 0.0,
            _ => w.lambda = 0.0,
        }
        let w: LossWeights = cfg.step.weights;
        for r in records(&mut Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap(), 4) {
            let f = |k: &str| r[k].as_f64().unwrap();
            let terms = [(w.alpha, f("l_rec")), (w.beta, f("l_adv_g")), (w.gamma, f("l_dis")), (w.lambda, f("l_cyc"))];
            let expected: f64 = terms.iter().filter(|(w, _)| *w != 0.0).map(|(w, l)| w * l).sum();
            assert!((f("total") - expected).abs() <= 1e-12 * expected.abs().max(1.0), "weight {k}: {r}");
        }
    }
}

#[test]
fn resume_rejects_other_config_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(&dir.path().join("corpus"), 5);
    let cfg = support::short_config(2);
    let ds = support::style_discriminator(&corpus, &cfg);
    let mut t = Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap();
    records(&mut t, 2);
    let ckpt = dir.path().join("run.ckpt");
    t.save(&ckpt).unwrap();

    let mut other = cfg.clone();
    other.step.weights.lambda = 2.0;
    assert_eq!(Trainer::resume(&corpus, &other, &ckpt).err().unwrap().category(), Category::Config);
    // the step budget is not part of the trajectory
    let longer = trainer::TrainConfig { max_steps: 50, ..cfg.clone() };
    assert!(Trainer::resume(&corpus, &longer, &ckpt).is_ok());

    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    fs::write(&ckpt, &bytes).unwrap();
    let err = Trainer::resume(&corpus, &cfg, &ckpt).err().unwrap();
    assert_eq!(err.category(), Category::Data);
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(Segments::load(&ckpt).is_err());
}
