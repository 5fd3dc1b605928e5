//! Command-line driver: corpus generation, training, evaluation, ablations,
//! hyperparameter sweeps and report summaries.
//!
//! Every run is described by a [`RunConfig`], read from an optional TOML file
//! and then overridden by flags. Each run directory receives `metrics.json`,
//! `checkpoint.bin`, `summary.txt` and `summary.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_synthetic, load_manifest, write_corpus, Corpus, CorpusSplit, SyntheticConfig};
use crate::model::Ablation;
use crate::trainer::{ablation_variants, evaluate, run_experiment, EvalOptions, MetricsReport, TrainConfig};
use crate::{Error, Result};

/// α values of the loss-weight sweep.
pub const ALPHA_SWEEP: [f64; 7] = [0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0];

/// Kernel sets of the pyramid sweep.
pub fn kernel_sweep() -> Vec<Vec<usize>> {
    vec![vec![3], vec![5], vec![7], vec![9], vec![3, 5, 7], vec![5, 7, 9], vec![3, 5, 7, 9]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Generate,
    Train,
    Eval,
    Ablate,
    Sweep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    #[default]
    Alpha,
    Kernels,
}

/// Where images come from: a manifest on disk, or the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV of `path,class_id`; when absent the synthetic corpus is used.
    pub manifest: Option<PathBuf>,
    /// Attribute table; defaults to `attributes.txt` beside the manifest.
    pub attributes: Option<PathBuf>,
    /// The first `train_classes` classes train, the rest are held out.
    pub train_classes: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            attributes: None,
            train_classes: 12,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Corpus> {
        match &self.manifest {
            Some(manifest) => {
                let attributes = self.attributes.clone().unwrap_or_else(|| {
                    manifest
                        .parent()
                        .unwrap_or_else(|| Path::new("."))
                        .join("attributes.txt")
                });
                load_manifest(manifest, &attributes)
            }
            None => generate_synthetic(&self.synthetic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub alphas: Vec<f64>,
    pub kernel_sets: Vec<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Alpha,
            alphas: ALPHA_SWEEP.to_vec(),
            kernel_sets: kernel_sweep(),
        }
    }
}

/// Everything one invocation needs. Serialised into every `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub out: PathBuf,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML config. Unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.command == Some(Command::Sweep) {
            let empty = match self.sweep.axis {
                SweepAxis::Alpha => self.sweep.alphas.is_empty(),
                SweepAxis::Kernels => self.sweep.kernel_sets.is_empty(),
            };
            if empty {
                return Err(Error::Config("sweep axis has no values".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "asl", about = "Attribute-shaped few-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Write a synthetic corpus (images, manifest.csv, attributes.txt).
    Generate(Flags),
    /// Train, evaluate, and save a checkpoint.
    Train(Flags),
    /// Evaluate a saved checkpoint.
    Eval(Flags),
    /// Train and evaluate every ablation variant.
    Ablate(Flags),
    /// Train and evaluate across α values or kernel sets.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Tabulate the metrics of finished runs.
    Summarize {
        /// Run directories, each holding a metrics.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for summary.txt and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by every run command. Each one overrides the config file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for training, evaluation and the synthetic corpus.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long)]
    pub n_way: Option<usize>,
    /// Support images per class.
    #[arg(long)]
    pub m_shot: Option<usize>,
    /// Weight of the attribute loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated kernel sizes, e.g. `3,5,7,9`.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
    /// Comma-separated ablation switches: no_vap, no_cam, no_psam,
    /// zero_attributes, no_attributes.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Evaluation task count.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Corpus directory holding manifest.csv and attributes.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to evaluate (`eval` only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Flags {
    /// Default, then file, then flags.
    pub fn resolve(&self, command: Command) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.command = Some(command);
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.data.synthetic.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(n) = self.n_way {
            cfg.train.n_way = n;
        }
        if let Some(m) = self.m_shot {
            cfg.train.m_shot = m;
        }
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        if let Some(k) = &self.kernels {
            cfg.train.kernel_sizes = k.clone();
        }
        if let Some(list) = &self.ablate {
            cfg.train.ablation = Ablation::parse(list)?;
        }
        if let Some(t) = self.tasks {
            cfg.train.eval_tasks = t;
        }
        if let Some(i) = self.iterations {
            cfg.train.max_iterations = i;
        }
        if let Some(dir) = &self.data {
            cfg.data.manifest = Some(dir.join("manifest.csv"));
            cfg.data.attributes = Some(dir.join("attributes.txt"));
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => return Ok(e.to_string()),
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        CliCommand::Generate(f) => generate(&f.resolve(Command::Generate)?),
        CliCommand::Train(f) => train_run(&f.resolve(Command::Train)?),
        CliCommand::Eval(f) => eval_run(&f.resolve(Command::Eval)?),
        CliCommand::Ablate(f) => ablate_run(&f.resolve(Command::Ablate)?),
        CliCommand::Sweep { axis, flags } => {
            let mut cfg = flags.resolve(Command::Sweep)?;
            if let Some(axis) = axis {
                cfg.sweep.axis = axis;
            }
            cfg.validate()?;
            sweep_run(&cfg)
        }
        CliCommand::Summarize { runs, out } => {
            let summary = summarize(&runs);
            if let Some(out) = out {
                summary.write(&out)?;
            }
            let mut text = summary.text();
            for w in &summary.warnings {
                let _ = writeln!(text, "warning: {w}");
            }
            Ok(text)
        }
    }
}

/// Writes the synthetic corpus described by `cfg.data.synthetic` to `cfg.out`.
pub fn generate(cfg: &RunConfig) -> Result<String> {
    let corpus = generate_synthetic(&cfg.data.synthetic)?;
    write_corpus(&corpus, &cfg.out)?;
    Ok(format!(
        "wrote {} images of {} classes to {}\n",
        corpus.samples.len(),
        corpus.num_classes(),
        cfg.out.display()
    ))
}

fn load_split(cfg: &RunConfig) -> Result<(Corpus, CorpusSplit)> {
    let corpus = cfg.data.load()?;
    let split = CorpusSplit::leading(&corpus, cfg.data.train_classes)?;
    Ok((corpus, split))
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Writes `metrics.json` plus single-row summaries into `dir`.
fn write_run(dir: &Path, report: &MetricsReport<RunConfig>, checkpoint: Option<&Checkpoint>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    if let Some(ckpt) = checkpoint {
        ckpt.save(dir.join("checkpoint.bin"))?;
    }
    Summary::from_reports(vec![(run_name(dir), report)]).write(dir)
}

fn train_one(cfg: &RunConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<MetricsReport<RunConfig>> {
    let (params, report) = run_experiment(&cfg.train, corpus, split)?;
    let report = report.with_config(cfg.clone());
    let ckpt = Checkpoint {
        params,
        alpha: cfg.train.alpha,
    };
    write_run(&cfg.out, &report, Some(&ckpt))?;
    Ok(report)
}

pub fn train_run(cfg: &RunConfig) -> Result<String> {
    let (corpus, split) = load_split(cfg)?;
    let report = train_one(cfg, &corpus, &split)?;
    Ok(Summary::from_reports(vec![(run_name(&cfg.out), &report)]).text())
}

pub fn eval_run(cfg: &RunConfig) -> Result<String> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(&path)?;
    let (corpus, split) = load_split(cfg)?;
    if ckpt.params.config.num_attributes != corpus.num_attributes
        || ckpt.params.config.image_shape != corpus.image_shape
    {
        return Err(Error::Config(format!(
            "checkpoint {} expects {} attributes and {:?} images; corpus has {} and {:?}",
            path.display(),
            ckpt.params.config.num_attributes,
            ckpt.params.config.image_shape,
            corpus.num_attributes,
            corpus.image_shape
        )));
    }
    let eval = evaluate(&ckpt.params, &corpus, &split, &EvalOptions::from_config(&cfg.train))?;
    let report = MetricsReport::empty(cfg.clone()).with_evaluation(&eval);
    write_run(&cfg.out, &report, None)?;
    Ok(Summary::from_reports(vec![(run_name(&cfg.out), &report)]).text())
}

/// File-system friendly form of a run label.
fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        match ch {
            c if c.is_ascii_alphanumeric() || c == '.' => out.push(c.to_ascii_lowercase()),
            _ if out.ends_with('_') || out.is_empty() => {}
            _ => out.push('_'),
        }
    }
    out.trim_end_matches('_').to_string()
}

fn run_many(cfg: &RunConfig, runs: Vec<(String, RunConfig)>) -> Result<String> {
    let (corpus, split) = load_split(cfg)?;
    let mut dirs = Vec::with_capacity(runs.len());
    for (label, mut sub) in runs {
        sub.out = cfg.out.join(slug(&label));
        train_one(&sub, &corpus, &split)?;
        dirs.push(sub.out);
    }
    let summary = summarize(&dirs);
    summary.write(&cfg.out)?;
    Ok(summary.text())
}

pub fn ablate_run(cfg: &RunConfig) -> Result<String> {
    let runs = ablation_variants()
        .into_iter()
        .map(|(label, ablation)| {
            let mut sub = cfg.clone();
            sub.train.ablation = ablation;
            (label.to_string(), sub)
        })
        .collect();
    run_many(cfg, runs)
}

/// The per-run configurations of a sweep, labelled by their swept value.
pub fn sweep_runs(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    match cfg.sweep.axis {
        SweepAxis::Alpha => cfg
            .sweep
            .alphas
            .iter()
            .map(|&alpha| {
                let mut sub = cfg.clone();
                sub.train.alpha = alpha;
                (format!("alpha_{alpha}"), sub)
            })
            .collect(),
        SweepAxis::Kernels => cfg
            .sweep
            .kernel_sets
            .iter()
            .map(|set| {
                let mut sub = cfg.clone();
                sub.train.kernel_sizes = set.clone();
                let name: Vec<String> = set.iter().map(usize::to_string).collect();
                (format!("kernels_{}", name.join("_")), sub)
            })
            .collect(),
    }
}

pub fn sweep_run(cfg: &RunConfig) -> Result<String> {
    run_many(cfg, sweep_runs(cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run: String,
    /// Short hash of the echoed configuration.
    pub config_digest: String,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub attr_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

fn digest(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{:08x}", h >> 32)
}

impl Summary {
    fn from_reports<C: Serialize>(reports: Vec<(String, &MetricsReport<C>)>) -> Self {
        let mut summary = Self::default();
        for (run, r) in reports {
            match (r.mean_accuracy, r.ci95) {
                (Some(mean_accuracy), Some(ci95)) => summary.rows.push(SummaryRow {
                    run,
                    config_digest: digest(&r.config),
                    mean_accuracy,
                    ci95,
                    attr_mae: r.attr_mae,
                }),
                _ => summary.warnings.push(format!("{run}: report has no evaluation")),
            }
        }
        summary.sort();
        summary
    }

    /// Best accuracy first; equal accuracies keep name order.
    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            b.mean_accuracy
                .total_cmp(&a.mean_accuracy)
                .then_with(|| a.run.cmp(&b.run))
        });
    }

    pub fn text(&self) -> String {
        let width = self.rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        let mut out = format!("{:<width$}  {:<8}  {:>17}  {:>8}\n", "run", "config", "accuracy (%)", "attr MAE");
        for r in &self.rows {
            let mae = r.attr_mae.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
            let acc = format!("{:.2} ± {:.2}", 100.0 * r.mean_accuracy, 100.0 * r.ci95);
            let _ = writeln!(out, "{:<width$}  {:<8}  {:>17}  {:>8}", r.run, r.config_digest, acc, mae);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.txt"), self.text())?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["run", "config_digest", "mean_accuracy", "ci95", "attr_mae"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.run.clone(),
                r.config_digest.clone(),
                r.mean_accuracy.to_string(),
                r.ci95.to_string(),
                r.attr_mae.map(|m| m.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `metrics.json` from each directory. Unreadable or malformed reports
/// become warnings and the remaining rows are still tabulated.
pub fn summarize(run_dirs: &[PathBuf]) -> Summary {
    let mut loaded = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs {
        let path = dir.join("metrics.json");
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<MetricsReport<serde_json::Value>>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(r) => loaded.push((run_name(dir), r)),
            Err(e) => warnings.push(format!("{}: {e}", path.display())),
        }
    }
    let mut summary = Summary::from_reports(loaded.iter().map(|(n, r)| (n.clone(), r)).collect());
    warnings.append(&mut summary.warnings);
    summary.warnings = warnings;
    summary
}
