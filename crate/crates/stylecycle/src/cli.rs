//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use stylecycle_core::adversaries::PretrainConfig;
use stylecycle_core::corpus::GeneratorConfig;
use stylecycle_core::probes::ProbeConfig;
use stylecycle_core::Frames;

use crate::corpus::{generate_to, read_frames, read_json, write_frames, write_json, Corpus};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport, RunLogs};
use crate::trainer::{self, Ablation, TrainConfig, TrainedModel};

pub const OUT_DIR_ENV: &str = "STYLECYCLE_OUT_DIR";
pub const ABLATIONS: [&str; 4] = ["full", "no_cyc", "no_dis", "no_adv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// `None` uses the default six-style corpus.
    pub corpus: Option<GeneratorConfig>,
    pub scarce_target: bool,
    pub split_fraction: f64,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub probes: ProbeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            scarce_target: false,
            split_fraction: 0.2,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            probes: ProbeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn generator(&self) -> GeneratorConfig {
        let g = self.corpus.clone().unwrap_or_else(|| GeneratorConfig::default_corpus(self.train.seed));
        if self.scarce_target {
            g.scarce_target()
        } else {
            g
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylecycle", version, about = "Speech-style transfer on synthetic disjoint multi-style corpora")]
pub struct Cli {
    /// Seed for corpus generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON pipeline configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "stylecycle-out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into <out>/corpus.
    GenData {
        /// Keep a sixth of the target-style utterances.
        #[arg(long)]
        scarce_target: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Pretrain and gate the frozen style discriminator.
    PretrainDisc {
        #[arg(long)]
        split_fraction: Option<f64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model into <out>/runs/<ablation>.
    Train(TrainArgs),
    /// Transfer one utterance to the target style.
    Transfer(TransferArgs),
    /// Train probes and evaluate trained runs.
    Eval {
        /// Comma-separated run names; defaults to every run present.
        #[arg(long, value_delimiter = ',')]
        runs: Vec<String>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write report JSON, CSV and plots from the evaluation.
    Report {
        #[arg(long)]
        no_plots: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One of full, no_cyc, no_dis, no_adv, gaussian.
    #[arg(long, default_value = "full")]
    pub ablation: String,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Continue from the run's checkpoint.
    #[arg(long, conflicts_with = "overwrite")]
    pub resume: bool,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, default_value = "full")]
    pub run: String,
    /// Utterance id from the corpus manifest.
    #[arg(long, conflicts_with_all = ["frames", "tokens"], required_unless_present = "frames")]
    pub utterance: Option<String>,
    /// External frame file; requires --tokens.
    #[arg(long, requires = "tokens")]
    pub frames: Option<PathBuf>,
    /// Whitespace-separated token ids.
    #[arg(long, requires = "frames")]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn style_discriminator(&self) -> PathBuf {
        self.root.join("style_discriminator").join("style_discriminator.ckpt")
    }
    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => read_json(p).map_err(|e| Error::Config(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        if let Some(g) = cfg.corpus.as_mut() {
            g.seed = seed;
        }
    }
    Ok(cfg)
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!("{} already exists; pass --overwrite to replace it", path.display())));
    }
    Ok(())
}

fn snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    write_json(&dir.join("resolved_config.json"), value)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let paths = Paths { root: cli.out_dir.clone() };
    match cli.command {
        Command::GenData { scarce_target, overwrite } => {
            let mut cfg = cfg;
            cfg.scarce_target |= scarce_target;
            let dir = paths.corpus();
            refuse_existing(&dir.join(crate::corpus::MANIFEST_FILE), overwrite)?;
            let gen = cfg.generator();
            gen.validate()?;
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let manifest = generate_to(&dir, &gen)?;
            snapshot(&dir, &gen)?;
            let corpus = Corpus::load(&dir)?;
            println!("corpus {} utterances={} hash={}", dir.display(), manifest.utterances.len(), corpus.hash);
        }
        Command::PretrainDisc { split_fraction, overwrite } => {
            let corpus = Corpus::load(&paths.corpus())?;
            let path = paths.style_discriminator();
            refuse_existing(&path, overwrite)?;
            let fraction = split_fraction.unwrap_or(cfg.split_fraction);
            let enc = cfg.train.model.encoder.clone();
            let (ds, report) = trainer::pretrain_style_discriminator(&corpus, &enc, fraction, &cfg.pretrain)?;
            trainer::save_style_discriminator(&path, &ds, &enc, &report)?;
            let dir = path.parent().unwrap();
            write_json(&dir.join("report.json"), &report)?;
            snapshot(dir, &(&cfg.pretrain, fraction))?;
            println!(
                "style discriminator heldout_accuracy={:.4} epochs={} -> {}",
                report.pretrain.heldout_accuracy,
                report.pretrain.epochs_run,
                path.display()
            );
        }
        Command::Train(args) => train(&paths, cfg, &args)?,
        Command::Transfer(args) => transfer(&paths, &args)?,
        Command::Eval { runs, overwrite } => eval(&paths, &cfg, runs, overwrite)?,
        Command::Report { no_plots } => report(&paths, !no_plots)?,
    }
    Ok(())
}

fn train(paths: &Paths, mut cfg: PipelineConfig, args: &TrainArgs) -> Result<()> {
    cfg.train.ablation =
        Ablation::named(&args.ablation).ok_or_else(|| Error::Config(format!("unknown ablation {}", args.ablation)))?;
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    let tc = &cfg.train;
    tc.validate()?;
    let (ds, _) = trainer::load_style_discriminator(&paths.style_discriminator())?;
    let corpus = Corpus::load(&paths.corpus())?;
    let dir = paths.run(&args.ablation);
    if !args.resume {
        refuse_existing(&dir.join(trainer::CHECKPOINT_FILE), args.overwrite)?;
    }
    snapshot(&dir, tc)?;
    let t = trainer::train_run(&corpus, &ds, &cfg.train.model.encoder, tc, &dir, args.checkpoint_every, args.resume)?;
    let ckpt = dir.join(trainer::CHECKPOINT_FILE);
    println!("trained {} to step {} -> {}", args.ablation, t.step, ckpt.display());
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(path, format!("token {t:?} is not a non-negative integer"))))
        .collect()
}

fn transfer(paths: &Paths, args: &TransferArgs) -> Result<()> {
    refuse_existing(&args.output, args.overwrite)?;
    let model = TrainedModel::load(&paths.run(&args.run).join(trainer::CHECKPOINT_FILE))?;
    let (tokens, frames): (Vec<usize>, Frames) = match (&args.utterance, &args.frames, &args.tokens) {
        (Some(id), _, _) => {
            let corpus = Corpus::load(&paths.corpus())?;
            let i = corpus.index_of(id).ok_or_else(|| Error::Config(format!("no utterance {id} in the manifest")))?;
            (corpus.tokens(i).to_vec(), corpus.frames[i].clone())
        }
        (None, Some(f), Some(t)) => (read_tokens(t)?, read_frames(f)?),
        _ => return Err(Error::Config("give --utterance or both --frames and --tokens".into())),
    };
    let vocab = model.cfg.model.decoder.vocab_size;
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Config(format!("token {bad} outside the vocabulary of {vocab}")));
    }
    if frames.dim() != model.cfg.model.encoder.frame_dim {
        return Err(Error::Config(format!(
            "frames have dimension {}, model expects {}",
            frames.dim(),
            model.cfg.model.encoder.frame_dim
        )));
    }
    let out = evalkit::transfer(&model, &tokens, &frames)?;
    write_frames(&args.output, &out)?;
    println!("transferred {} frames -> {} frames at {}", frames.num_frames(), out.num_frames(), args.output.display());
    Ok(())
}

fn eval(paths: &Paths, cfg: &PipelineConfig, mut runs: Vec<String>, overwrite: bool) -> Result<()> {
    let out = paths.eval().join("evaluation.json");
    refuse_existing(&out, overwrite)?;
    let corpus = Corpus::load(&paths.corpus())?;
    if runs.is_empty() {
        let dir = paths.root.join("runs");
        let mut found: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(trainer::CHECKPOINT_FILE).exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        // reference model first, then the ablations in their usual order
        found.sort_by_key(|n| (ABLATIONS.iter().position(|a| a == n).unwrap_or(ABLATIONS.len()), n.clone()));
        runs = found;
    }
    if runs.is_empty() {
        return Err(Error::Config("no trained runs to evaluate".into()));
    }
    let probes = evalkit::train_probes(&corpus, &cfg.probes)?;
    evalkit::save_probes(&paths.eval().join("probes.json"), &probes)?;
    let mut models = Vec::new();
    for name in &runs {
        let ckpt = paths.run(name).join(trainer::CHECKPOINT_FILE);
        let model = TrainedModel::load(&ckpt)?;
        let m = evalkit::evaluate(name, &ckpt, &model, &corpus, &probes, cfg.train.seed)?;
        println!(
            "{name}: seen style_acc={:.3} speaker_cos={:.3} | unseen style_acc={:.3} speaker_cos={:.3}",
            m.seen.style_accuracy, m.seen.speaker_cosine.mean, m.unseen.style_accuracy, m.unseen.speaker_cosine.mean
        );
        models.push(m);
    }
    let report = EvalReport::new(&corpus, &probes, models);
    write_json(&out, &report)?;
    snapshot(&paths.eval(), cfg)?;
    println!("evaluation -> {}", out.display());
    Ok(())
}

fn report(paths: &Paths, plots: bool) -> Result<()> {
    let report: EvalReport = read_json(&paths.eval().join("evaluation.json"))?;
    if report.schema_version != evalkit::REPORT_SCHEMA_VERSION {
        return Err(Error::format(paths.eval(), format!("report schema version {}", report.schema_version)));
    }
    let mut logs = Vec::new();
    for m in &report.models {
        let dir = paths.run(&m.name);
        let steps = dir.join("train.jsonl");
        let metrics = dir.join("metrics.jsonl");
        logs.push(RunLogs {
            name: m.name.clone(),
            steps: if steps.exists() { evalkit::read_log(&steps)? } else { Vec::new() },
            metrics: if metrics.exists() { evalkit::read_log(&metrics)? } else { Vec::new() },
        });
    }
    let files = evalkit::emit_report(&report, &paths.report(), &logs, plots)?;
    print!("{}", report.csv());
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[CONFIG]: {first}");
            return crate::error::Category::Config.exit_code();
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let c = e.category();
            eprintln!("error[{}]: {}", c.as_str(), e.to_string().replace('\n', " "));
            c.exit_code()
        }
    }
}
