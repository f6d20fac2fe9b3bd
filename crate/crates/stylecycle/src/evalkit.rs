//! Objective evaluation: probe training, transfer metrics, reports and plots.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stylecycle_core::corpus::{Split, StyleRole};
use stylecycle_core::probes::{cosine, style_features, ProbeConfig, SpeakerProbe, StyleProbe};
use stylecycle_core::Frames;

use crate::corpus::{read_json, write_json, Corpus};
use crate::error::{Error, Result};
use crate::trainer::{LogRecord, MetricsRecord, TrainedModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PROBE_GATE: f64 = 0.95;
pub const CSV_HEADER: &str = "model,direction,style_acc,speaker_cos,recon_mse";

pub fn frames_hash(frames: &Frames) -> String {
    let mut h = Sha256::new();
    h.update((frames.num_frames() as u64).to_le_bytes());
    h.update((frames.dim() as u64).to_le_bytes());
    for v in frames.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub style_classes: Vec<String>,
    pub speakers: Vec<String>,
    pub style_heldout_accuracy: f64,
    pub speaker_heldout_accuracy: f64,
    pub gate: f64,
    /// Mean probe cosine between distinct ground-truth utterances of one
    /// speaker, and across speakers.
    pub gt_same_speaker_cosine: f64,
    pub gt_cross_speaker_cosine: f64,
    /// Hashes of every frame matrix the probes were fitted on.
    pub training_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probes {
    pub style: StyleProbe,
    pub speaker: SpeakerProbe,
    pub report: ProbeReport,
}

impl Probes {
    pub fn class_of(&self, style_id: &str) -> Option<usize> {
        self.report.style_classes.iter().position(|s| s == style_id)
    }
}

/// Fits both probes on ground-truth training utterances of the seen styles
/// and gates their dev-split accuracies.
pub fn train_probes(corpus: &Corpus, cfg: &ProbeConfig) -> Result<Probes> {
    let m = &corpus.manifest;
    let style_classes: Vec<String> =
        m.styles.iter().filter(|s| s.role != StyleRole::Unseen).map(|s| s.style_id.clone()).collect();
    let speakers: Vec<String> = m
        .styles
        .iter()
        .filter(|s| s.role != StyleRole::Unseen)
        .map(|s| s.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class = |i: usize| style_classes.iter().position(|s| *s == m.utterances[i].style_id);
    let spk = |i: usize| speakers.iter().position(|s| *s == m.utterances[i].speaker_id);
    let pick = |split: Split| -> Vec<usize> {
        let mut v = corpus.select(split, StyleRole::Source);
        v.extend(corpus.select(split, StyleRole::Target));
        v.sort_unstable();
        v
    };
    let (train, dev) = (pick(Split::Train), pick(Split::Dev));
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Gate("probe training needs non-empty train and dev splits".into()));
    }

    let examples: Vec<(Vec<f64>, usize)> =
        train.iter().map(|&i| (style_features(&corpus.frames[i]), class(i).unwrap())).collect();
    let style = StyleProbe::train(&examples, style_classes.len(), cfg)?;
    let dev_style: Vec<(&Frames, usize)> = dev.iter().map(|&i| (&corpus.frames[i], class(i).unwrap())).collect();
    let style_acc = style.accuracy(&dev_style);

    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); speakers.len()];
    let mut reference: Vec<Vec<&Frames>> = vec![Vec::new(); speakers.len()];
    for &i in &train {
        let k = spk(i).unwrap();
        groups[k].push(stylecycle_core::probes::speaker_features(&corpus.frames[i]));
        reference[k].push(&corpus.frames[i]);
    }
    let speaker = SpeakerProbe::train(&groups, cfg)?;
    let dev_spk: Vec<(&Frames, usize)> = dev.iter().map(|&i| (&corpus.frames[i], spk(i).unwrap())).collect();
    let speaker_acc = speaker.centroid_accuracy(&reference, &dev_spk);

    let (same, cross) = gt_speaker_cosines(corpus, &speaker, &dev);
    let report = ProbeReport {
        style_classes,
        speakers,
        style_heldout_accuracy: style_acc,
        speaker_heldout_accuracy: speaker_acc,
        gate: PROBE_GATE,
        gt_same_speaker_cosine: same,
        gt_cross_speaker_cosine: cross,
        training_hashes: train.iter().map(|&i| frames_hash(&corpus.frames[i])).collect(),
    };
    if style_acc < PROBE_GATE || speaker_acc < PROBE_GATE {
        return Err(Error::Gate(format!(
            "probe accuracies style {style_acc:.3} / speaker {speaker_acc:.3} below gate {PROBE_GATE}"
        )));
    }
    Ok(Probes { style, speaker, report })
}

fn gt_speaker_cosines(corpus: &Corpus, probe: &SpeakerProbe, idx: &[usize]) -> (f64, f64) {
    let emb: Vec<Vec<f64>> = idx.iter().map(|&i| probe.embed(&corpus.frames[i])).collect();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let c = cosine(&emb[a], &emb[b]);
            if corpus.manifest.utterances[idx[a]].speaker_id == corpus.manifest.utterances[idx[b]].speaker_id {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    (same / ns.max(1) as f64, cross / nc.max(1) as f64)
}

pub fn save_probes(path: &Path, probes: &Probes) -> Result<()> {
    write_json(path, probes)
}

pub fn load_probes(path: &Path) -> Result<Probes> {
    if !path.exists() {
        return Err(Error::Gate(format!("no probes at {} (run eval to train them)", path.display())));
    }
    read_json(path)
}

/// Mean and standard deviation over the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub count: usize,
    pub style_accuracy: f64,
    pub speaker_cosine: Stat,
    pub recon_mse: Stat,
}

impl DirectionMetrics {
    fn check(&self) -> Result<()> {
        let ok = self.style_accuracy.is_finite()
            && (0.0..=1.0).contains(&self.style_accuracy)
            && self.speaker_cosine.mean.is_finite()
            && (-1.0 - 1e-9..=1.0 + 1e-9).contains(&self.speaker_cosine.mean)
            && self.recon_mse.mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(stylecycle_core::Error::NonFinite("evaluation metric out of range".into()).into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub name: String,
    pub checkpoint: PathBuf,
    pub step: u64,
    pub config_hash: String,
    pub seen: DirectionMetrics,
    pub unseen: DirectionMetrics,
}

/// Transfers one utterance to the trained target style.
pub fn transfer(model: &TrainedModel, tokens: &[usize], frames: &Frames) -> Result<Frames> {
    let max = 2 * frames.num_frames();
    Ok(model.model.transfer(tokens, frames, &model.z_star, max)?.frames_hat)
}

/// Style accuracy, speaker cosine and reconstruction error over `eval`.
pub fn evaluate_direction(
    model: &TrainedModel,
    corpus: &Corpus,
    probes: &Probes,
    eval: &[usize],
    seed: u64,
) -> Result<DirectionMetrics> {
    if eval.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let m = &corpus.manifest;
    let target = probes
        .class_of(&m.target_style_id)
        .ok_or_else(|| Error::Config("target style unknown to the style probe".into()))?;
    let leak: BTreeSet<&str> = probes.report.training_hashes.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut cos, mut mse) = (0usize, Vec::new(), Vec::new());
    for &i in eval {
        let u = &m.utterances[i];
        let src = &corpus.frames[i];
        let out = transfer(model, &u.tokens, src)?;
        if leak.contains(frames_hash(&out).as_str()) {
            return Err(Error::Gate(format!("transfer of {} coincides with a probe training utterance", u.id)));
        }
        if probes.style.predict(&out) == target {
            hits += 1;
        }
        let others: Vec<usize> =
            (0..m.utterances.len()).filter(|&j| j != i && m.utterances[j].speaker_id == u.speaker_id).collect();
        if others.is_empty() {
            return Err(Error::Config(format!("speaker {} has no other ground-truth utterance", u.speaker_id)));
        }
        let reference = others[(rng.next_u64() % others.len() as u64) as usize];
        cos.push(cosine(&probes.speaker.embed(&out), &probes.speaker.embed(&corpus.frames[reference])));
        let rec = model.model.reconstruct(&u.tokens, src)?;
        mse.push(rec.mean_squared_distance(src).expect("teacher forcing keeps the length"));
    }
    let d = DirectionMetrics {
        count: eval.len(),
        style_accuracy: hits as f64 / eval.len() as f64,
        speaker_cosine: Stat::of(&cos),
        recon_mse: Stat::of(&mse),
    };
    d.check()?;
    Ok(d)
}

/// Seen-style (test split source styles) and unseen-style evaluation.
pub fn evaluate(
    name: &str,
    checkpoint: &Path,
    model: &TrainedModel,
    corpus: &Corpus,
    probes: &Probes,
    seed: u64,
) -> Result<ModelEval> {
    let seen = corpus.select(Split::Test, StyleRole::Source);
    let unseen = corpus.select(Split::Test, StyleRole::Unseen);
    Ok(ModelEval {
        name: name.to_string(),
        checkpoint: checkpoint.to_path_buf(),
        step: model.step,
        config_hash: model.cfg.hash(),
        seen: evaluate_direction(model, corpus, probes, &seen, seed)?,
        unseen: evaluate_direction(model, corpus, probes, &unseen, seed ^ 1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiteratureRow {
    pub system: String,
    pub direction: String,
    pub speaker_cosine: f64,
}

pub fn literature_context() -> Vec<LiteratureRow> {
    [("proposed", "R2C", 0.69), ("proposed", "TR2P", 0.64), ("MRF-ACC", "R2C", 0.57), ("MRF-ACC", "TR2P", 0.40)]
        .into_iter()
        .map(|(s, d, c)| LiteratureRow { system: s.into(), direction: d.into(), speaker_cosine: c })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub note: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub probes: ProbeReport,
    /// One entry per trained model; the first is the reference model.
    pub models: Vec<ModelEval>,
    /// Published listening-test cosines, for context only; they come from a
    /// different embedding and are not comparable in absolute value.
    pub literature_context: Vec<LiteratureRow>,
}

impl EvalReport {
    pub fn new(corpus: &Corpus, probes: &Probes, models: Vec<ModelEval>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            note: "objective proxies: style accuracy from a style probe, speaker cosine from a speaker probe".into(),
            config_hash: models.first().map(|m| m.config_hash.clone()).unwrap_or_default(),
            corpus_hash: corpus.hash.clone(),
            probes: probes.report.clone(),
            models,
            literature_context: literature_context(),
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelEval> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.models {
            for (dir, d) in [("seen", &m.seen), ("unseen", &m.unseen)] {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    m.name, dir, d.style_accuracy, d.speaker_cosine.mean, d.recon_mse.mean
                ));
            }
        }
        s
    }
}

pub fn read_log<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

/// Training logs of one model, for plotting.
pub struct RunLogs {
    pub name: String,
    pub steps: Vec<LogRecord>,
    pub metrics: Vec<MetricsRecord>,
}

/// Writes `report.json`, `report.csv` and, unless disabled, SVG curves.
pub fn emit_report(report: &EvalReport, out_dir: &Path, logs: &[RunLogs], plots: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("report.json");
    write_json(&json, report)?;
    let csv = out_dir.join("report.csv");
    fs::write(&csv, report.csv()).map_err(|e| Error::io(&csv, e))?;
    let mut files = vec![json, csv];
    if plots {
        for run in logs.iter().filter(|r| !r.steps.is_empty()) {
            let p = out_dir.join(format!("{}_losses.svg", run.name));
            plot_losses(&p, run)?;
            files.push(p);
        }
        if logs.iter().any(|r| !r.metrics.is_empty()) {
            let p = out_dir.join("style_spread.svg");
            plot_spread(&p, logs)?;
            files.push(p);
        }
    }
    Ok(files)
}

/// Averages consecutive points so at most `max` remain.
fn downsample(points: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    let w = points.len().div_ceil(max).max(1);
    points
        .chunks(w)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn plot_losses(path: &Path, run: &RunLogs) -> Result<()> {
    use plotters::prelude::*;
    type Getter = fn(&LogRecord) -> f64;
    let series: [(&str, Getter, RGBColor); 6] = [
        ("total", |r| r.total, BLACK),
        ("l_rec", |r| r.l_rec, BLUE),
        ("l_cyc", |r| r.l_cyc, CYAN),
        ("l_adv_d", |r| r.l_adv_d, RED),
        ("l_adv_g", |r| r.l_adv_g, MAGENTA),
        ("l_dis", |r| r.l_dis, GREEN),
    ];
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let lines: Vec<(&str, Vec<(f64, f64)>, RGBColor)> = series
        .iter()
        .map(|(name, get, color)| {
            let pts: Vec<(f64, f64)> = run.steps.iter().map(|r| (r.step as f64, get(r).max(1e-6).log10())).collect();
            (*name, downsample(&pts, 1000), *color)
        })
        .collect();
    let x_max = run.steps.last().map(|r| r.step as f64).unwrap_or(1.0).max(1.0);
    let (lo, hi) = lines
        .iter()
        .flat_map(|l| l.1.iter().map(|p| p.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{}: training losses (log10)", run.name), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..x_max, (lo - 0.1)..(hi + 0.1))
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").draw().map_err(|e| plot_err(path, e))?;
    for (name, pts, color) in lines {
        chart
            .draw_series(LineSeries::new(pts, &color))
            .map_err(|e| plot_err(path, e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

fn plot_spread(path: &Path, logs: &[RunLogs]) -> Result<()> {
    use plotters::prelude::*;
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let all = logs.iter().flat_map(|r| r.metrics.iter());
    let x_max = all.clone().map(|m| m.step as f64).fold(1.0, f64::max);
    let y_max = all.map(|m| m.z_spread).fold(1e-6, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption("target style spread around z*", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max * 1.05)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").draw().map_err(|e| plot_err(path, e))?;
    for (k, run) in logs.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let pts: Vec<(f64, f64)> = run.metrics.iter().map(|m| (m.step as f64, m.z_spread)).collect();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| plot_err(path, e))?
            .label(run.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_and_downsample() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0)).collect();
        assert_eq!(downsample(&pts, 5).len(), 5);
        assert_eq!(downsample(&pts, 100).len(), 10);
    }

    #[test]
    fn literature_rows_are_labelled() {
        let rows = literature_context();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| r.system == "MRF-ACC" && r.speaker_cosine == 0.40));
    }
}
