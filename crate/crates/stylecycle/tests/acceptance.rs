//! Acceptance harness: prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Long training runs are cached under `STYLECYCLE_ACCEPTANCE_DIR` (default:
//! a directory in cargo's target tmpdir) and resumed from their checkpoints,
//! so an interrupted harness picks up where it stopped.
//! `STYLECYCLE_ACCEPTANCE_STEPS` shortens the runs for development; shortened
//! runs always report FAIL for the end-to-end criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use stylecycle::corpus::{generate_to, Corpus};
use stylecycle::evalkit::{self, ModelEval};
use stylecycle::trainer::{self, Ablation, TrainConfig, Trainer, CHECKPOINT_FILE, LOG_FILE};
use stylecycle_core::adversaries::{PretrainConfig, StyleDiscriminator};
use stylecycle_core::corpus::GeneratorConfig;
use stylecycle_core::objectives::{adversarial_d, style_distortion, total_loss, LossWeights};
use stylecycle_core::probes::ProbeConfig;
use stylecycle_core::train::{StepConfig, Term};

const FULL_STEPS: u64 = 20_000;
const SPLIT_FRACTION: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn line(n: usize, name: &str, o: &Outcome) {
    println!("{} {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn flows() -> Outcome {
    let c = common::flow_check(100, 2024);
    Outcome {
        pass: c.instances == 100 && c.max_log_det_error <= 1e-4 && c.max_inverse_error <= 1e-6,
        detail: format!(
            "{} flows, max log-det error {:.2e}, max inverse error {:.2e}",
            c.instances, c.max_log_det_error, c.max_inverse_error
        ),
    }
}

fn gradients() -> Outcome {
    let p = common::TinyProblem::new(11);
    let cfg = StepConfig::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for term in [Term::Rec, Term::AdvD, Term::AdvG, Term::Dis, Term::Cyc] {
        let c = common::gradient_check(&p, &cfg, term, 1e-3, 1e-7);
        pass &= c.value.is_finite() && c.fraction() >= 0.99;
        parts.push(format!("{term:?} {}/{}", c.passed, c.coordinates));
    }
    Outcome { pass, detail: parts.join(", ") }
}

fn algebra() -> Outcome {
    let total = total_loss(&LossWeights::default(), 2.0, 0.3, 1.0, 0.1, 2.0).map(|b| b.total).unwrap_or(f64::NAN);
    let (z, z_star) = ([1.0], [0.0]);
    let dis = style_distortion([(0.8, &z[..]), (0.8, &z[..])], &z_star);
    let adv = adversarial_d(&[0.5; 3], &[0.5; 3]);
    let ln4 = 2.0 * std::f64::consts::LN_2;
    Outcome {
        pass: (total - 5.5).abs() <= 1e-9 && (dis - 0.8).abs() <= 1e-9 && (adv - ln4).abs() <= 1e-9,
        detail: format!("total {total}, distortion {dis}, constant-half adversarial {adv} vs {ln4}"),
    }
}

fn zero_weights() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 5);
    let base = support::short_config(6);
    let ds = support::style_discriminator(&corpus, &base);
    let mut worst = 0.0f64;
    for k in 0..4 {
        let mut cfg = base.clone();
        let w = &mut cfg.step.weights;
        match k {
            0 => w.alpha = 0.0,
            1 => w.beta = 0.0,
            2 => w.gamma = 0.0,
            _ => w.lambda = 0.0,
        }
        let w = cfg.step.weights;
        let mut t = Trainer::new(&corpus, &ds, &cfg.model.encoder, &cfg).unwrap();
        for _ in 0..cfg.max_steps {
            let (r, _, _) = t.step_once().unwrap();
            let terms = [(w.alpha, r.l_rec), (w.beta, r.l_adv_g), (w.gamma, r.l_dis), (w.lambda, r.l_cyc)];
            let kept: f64 = terms.iter().filter(|(w, _)| *w != 0.0).map(|(w, l)| w * l).sum();
            worst = worst.max((r.total - kept).abs() / kept.abs().max(1.0));
        }
    }
    Outcome { pass: worst <= 1e-12, detail: format!("worst relative deviation {worst:.2e} over 4 weights x 6 steps") }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(&dir.path().join("corpus"), 9);
    let cfg = support::short_config(12);
    let ds = support::style_discriminator(&corpus, &cfg);
    let enc = cfg.model.encoder.clone();
    let run = |name: &str, split: Option<u64>| -> (Vec<u8>, Vec<f64>) {
        let d = dir.path().join(name);
        if let Some(s) = split {
            let first = TrainConfig { max_steps: s, ..cfg.clone() };
            trainer::train_run(&corpus, &ds, &enc, &first, &d, 5, false).unwrap();
            trainer::train_run(&corpus, &ds, &enc, &cfg, &d, 5, true).unwrap();
        } else {
            trainer::train_run(&corpus, &ds, &enc, &cfg, &d, 5, false).unwrap();
        }
        let m = trainer::TrainedModel::load(&d.join(CHECKPOINT_FILE)).unwrap();
        (fs::read(d.join(LOG_FILE)).unwrap(), m.model.store.data().to_vec())
    };
    let (a, pa) = run("a", None);
    let (b, pb) = run("b", None);
    let (c, pc) = run("c", Some(7));
    let same = a == b && pa == pb;
    let resumed = a == c && pa == pc;
    Outcome {
        pass: same && resumed && !a.is_empty(),
        detail: format!("same seed identical: {same}, resumed at step 7 identical: {resumed}"),
    }
}

struct Workspace {
    root: PathBuf,
    steps: u64,
}

impl Workspace {
    fn corpus(&self) -> Corpus {
        let dir = self.root.join("corpus");
        if Corpus::load(&dir).is_err() {
            let _ = fs::remove_dir_all(&dir);
            generate_to(&dir, &GeneratorConfig::default_corpus(TrainConfig::default().seed)).unwrap();
        }
        Corpus::load(&dir).unwrap()
    }

    fn style_discriminator(&self, corpus: &Corpus) -> (StyleDiscriminator, f64) {
        let path = self.root.join("style_discriminator.ckpt");
        let enc = TrainConfig::default().model.encoder;
        if let Ok((ds, report)) = trainer::load_style_discriminator(&path) {
            return (ds, report.pretrain.heldout_accuracy);
        }
        let (ds, report) =
            trainer::pretrain_style_discriminator(corpus, &enc, SPLIT_FRACTION, &PretrainConfig::default()).unwrap();
        trainer::save_style_discriminator(&path, &ds, &enc, &report).unwrap();
        (ds, report.pretrain.heldout_accuracy)
    }

    /// Trains (or resumes) one ablation and returns its evaluation and
    /// cumulative training time in seconds.
    fn run(&self, name: &str, corpus: &Corpus, ds: &StyleDiscriminator, probes: &evalkit::Probes) -> (ModelEval, f64) {
        let dir = self.root.join("runs").join(name);
        let cfg = TrainConfig {
            max_steps: self.steps,
            ablation: Ablation::named(name).expect("known ablation"),
            ..TrainConfig::default()
        };
        let ckpt = dir.join(CHECKPOINT_FILE);
        let resume = trainer::TrainedModel::load(&ckpt).is_ok_and(|m| m.cfg.hash() == cfg.hash());
        let done = resume && trainer::TrainedModel::load(&ckpt).is_ok_and(|m| m.step >= cfg.max_steps);
        if !done {
            if !resume {
                let _ = fs::remove_dir_all(&dir);
            }
            trainer::train_run(corpus, ds, &cfg.model.encoder, &cfg, &dir, 1000, resume).unwrap();
        }
        let model = trainer::TrainedModel::load(&ckpt).unwrap();
        let eval = evalkit::evaluate(name, &ckpt, &model, corpus, probes, cfg.seed).unwrap();
        (eval, model.wallclock)
    }
}

fn main() -> ExitCode {
    let root = std::env::var_os("STYLECYCLE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let steps = std::env::var("STYLECYCLE_ACCEPTANCE_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(FULL_STEPS);
    fs::create_dir_all(&root).unwrap();
    let ws = Workspace { root, steps };

    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.pass;
        line(n, name, &o);
    };
    report(1, "flow log-det and inverse", flows());
    report(2, "gradient suite", gradients());
    report(3, "loss algebra", algebra());

    let corpus = ws.corpus();
    let (ds, acc) = ws.style_discriminator(&corpus);
    report(4, "style discriminator gate", Outcome { pass: acc >= 0.95, detail: format!("held-out accuracy {acc:.4}") });

    let probes = evalkit::train_probes(&corpus, &ProbeConfig::default()).unwrap();
    let (full, secs) = ws.run("full", &corpus, &ds, &probes);
    let reduced = steps < FULL_STEPS;
    let note = if reduced { format!(" (reduced run of {steps} steps)") } else { String::new() };
    report(
        5,
        "end-to-end transfer",
        Outcome {
            pass: !reduced && secs < 3600.0 && full.seen.style_accuracy >= 0.80 && full.unseen.style_accuracy >= 0.60,
            detail: format!(
                "seen style accuracy {:.3}, unseen {:.3}, {:.0} s of training{note}",
                full.seen.style_accuracy, full.unseen.style_accuracy, secs
            ),
        },
    );

    let (no_cyc, _) = ws.run("no_cyc", &corpus, &ds, &probes);
    let (no_dis, _) = ws.run("no_dis", &corpus, &ds, &probes);
    let cos = |m: &ModelEval| (m.seen.speaker_cosine.mean, m.unseen.speaker_cosine.mean);
    let (f, c, d) = (cos(&full), cos(&no_cyc), cos(&no_dis));
    let margin = (f.0 - c.0.max(d.0)).min(f.1 - c.1.max(d.1));
    report(
        6,
        "speaker cosine ordering",
        Outcome {
            pass: !reduced && margin >= 0.03,
            detail: format!(
                "seen full {:.3} / no_cyc {:.3} / no_dis {:.3}; unseen full {:.3} / no_cyc {:.3} / no_dis {:.3}{note}",
                f.0, c.0, d.0, f.1, c.1, d.1
            ),
        },
    );

    report(7, "zero-weight coherence", zero_weights());
    report(8, "determinism and resume", determinism());

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
