//! Argument parsing and command dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use colomil_core::slide::Split;
use colomil_core::synth::{write_dataset, SynthConfig};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline::{self, SlideFilter};
use crate::workdir::record_provenance;

#[derive(Debug, Parser)]
#[command(name = "colomil", version, about = "Colorectal slide grading with severity-ranked multiple-instance learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic slide corpus with known tile labels.
    Synth(SynthArgs),
    /// Otsu tissue masks for every slide.
    Segment(RunArgs),
    /// Tissue tile grids from the stored masks.
    Tile(RunArgs),
    /// Supervised pre-training then weak Top-k training.
    Train(RunArgs),
    /// Diagnose slides with a checkpoint.
    Infer(InferArgs),
    /// Metrics, confidence intervals and confidence densities.
    Eval(EvalArgs),
    /// Fraction of relevant tiles lost by Top-k sampling.
    Retention(RunArgs),
    /// segment, tile, train, infer, eval and retention in sequence.
    Run(RunArgs),
    /// Start the review HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub n_slides: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Tile-aligned grid cell side in pixels.
    #[arg(long, default_value_t = 64)]
    pub cell: u32,
    /// 0 gives clean textures; up to 1 adds noise and stain jitter.
    #[arg(long)]
    pub difficulty: Option<f64>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to start from: full or desk.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.truth.jsonl` tile labels.
    #[arg(long)]
    pub truth_dir: Option<PathBuf>,
    /// Tiles kept per slide by Top-k sampling.
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub epochs_full: Option<usize>,
    #[arg(long)]
    pub epochs_weak: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub sample_validation: Option<OnOff>,
    #[arg(long, value_enum)]
    pub deterministic: Option<OnOff>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated retention sampling caps.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Restrict to these slide ids.
    #[arg(long = "slide")]
    pub slides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// File with one `user:token` pair per line; no auth when absent.
    #[arg(long)]
    pub token_file: Option<PathBuf>,
    /// Concurrent inference jobs.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

impl RunArgs {
    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let preset = self.preset.as_deref().unwrap_or("full");
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, preset)?,
            None => RunConfig::preset(preset)?,
        };
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
        }
        macro_rules! set {
            ($field:expr, $val:expr) => {
                if let Some(v) = $val.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.manifest, self.manifest);
        set!(cfg.workdir, self.workdir);
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if self.truth_dir.is_some() {
            cfg.truth_dir = self.truth_dir.clone();
        }
        set!(cfg.m, self.m);
        set!(cfg.top_n, self.top_n);
        set!(cfg.train.epochs_full, self.epochs_full);
        set!(cfg.train.epochs_weak, self.epochs_weak);
        set!(cfg.train.lr, self.lr);
        set!(cfg.train.seed, self.seed);
        set!(cfg.threads, self.threads);
        set!(cfg.ks, self.ks);
        if let Some(v) = self.sample_validation {
            cfg.sample_validation = v == OnOff::On;
        }
        if let Some(v) = self.deterministic {
            cfg.train.deterministic = v == OnOff::On;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn configure_threads(n: usize) {
    if n > 0 {
        // Fails only if a pool already exists, which keeps the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("summaries serialize")
}

/// Runs one command and returns its JSON summary.
pub fn execute(command: Command) -> Result<Value, CliError> {
    match command {
        Command::Synth(a) => {
            let mut cfg = SynthConfig {
                n_slides: a.n_slides,
                seed: a.seed,
                cell: a.cell,
                ..SynthConfig::default()
            };
            if let Some(d) = a.difficulty {
                cfg.difficulty = d;
            }
            let manifest = write_dataset(&cfg, &a.out)?;
            Ok(json!({
                "out": a.out,
                "slides": manifest.entries.len(),
                "manifest": a.out.join("manifest.jsonl"),
            }))
        }
        Command::Segment(a) => {
            let cfg = a.resolve()?;
            configure_threads(cfg.threads);
            let out = pipeline::segment(&cfg)?;
            record_provenance(&cfg, "segment", None)?;
            let degenerate = out.iter().filter(|s| s.otsu_threshold.is_none()).count();
            Ok(json!({ "slides": out.len(), "degenerate": degenerate }))
        }
        Command::Tile(a) => {
            let cfg = a.resolve()?;
            configure_threads(cfg.threads);
            let r = pipeline::tile(&cfg)?;
            record_provenance(&cfg, "tile", None)?;
            Ok(json!({
                "slides": r.counts.len(),
                "tiles": r.counts.values().sum::<usize>(),
                "reduction": r.reduction,
            }))
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            configure_threads(cfg.threads);
            let s = pipeline::train(&cfg)?;
            record_provenance(&cfg, "train", Some(s.model_version.clone()))?;
            Ok(train_value(&s, &cfg))
        }
        Command::Infer(a) => {
            let cfg = a.run.resolve()?;
            configure_threads(cfg.threads);
            let filter = SlideFilter {
                split: a.split.split(),
                ids: a.slides,
            };
            let out = pipeline::infer(&cfg, &filter)?;
            record_provenance(&cfg, "infer", Some(out.model_version.clone()))?;
            Ok(json!({
                "model_version": out.model_version,
                "diagnosed": out.results.len(),
                "skipped": out.skipped,
            }))
        }
        Command::Eval(a) => {
            let cfg = a.run.resolve()?;
            let filter = SlideFilter {
                split: a.split.split(),
                ids: Vec::new(),
            };
            let r = pipeline::eval(&cfg, &filter)?;
            record_provenance(&cfg, "eval", None)?;
            Ok(eval_value(&r))
        }
        Command::Retention(a) => {
            let cfg = a.resolve()?;
            let r = pipeline::retention(&cfg, &cfg.ks)?;
            record_provenance(&cfg, "retention", None)?;
            Ok(to_value(&r))
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            configure_threads(cfg.threads);
            pipeline::segment(&cfg)?;
            pipeline::tile(&cfg)?;
            let s = pipeline::train(&cfg)?;
            let test = SlideFilter {
                split: Some(Split::Test),
                ids: Vec::new(),
            };
            pipeline::infer(&cfg, &test)?;
            let e = pipeline::eval(&cfg, &test)?;
            let retention = if cfg.record_rankings {
                Some(to_value(&pipeline::retention(&cfg, &cfg.ks)?))
            } else {
                None
            };
            record_provenance(&cfg, "run", Some(s.model_version.clone()))?;
            Ok(json!({
                "train": train_value(&s, &cfg),
                "eval": eval_value(&e),
                "retention": retention,
            }))
        }
        Command::Serve(a) => {
            let cfg = a.run.resolve()?;
            configure_threads(cfg.threads);
            let settings = colomil_service::ServiceConfig {
                listen: a.listen,
                workdir: cfg.workdir.join("service"),
                checkpoint: cfg.checkpoint_path(),
                token_file: a.token_file,
                workers: a.workers.max(1),
                tile_size: cfg.tile_size,
                mask_factor: cfg.mask_factor,
                tissue_threshold: cfg.tissue_threshold,
                top_n: cfg.top_n,
                batch_infer: cfg.train.batch_infer,
            };
            colomil_service::serve_blocking(settings).map_err(|e| CliError::Serve(e.to_string()))?;
            Ok(json!({ "stopped": true }))
        }
    }
}

fn train_value(s: &pipeline::TrainSummary, cfg: &RunConfig) -> Value {
    json!({
        "model_version": s.model_version,
        "checkpoint": cfg.checkpoint_path(),
        "parameters": s.parameters,
        "supervised_epoch": s.supervised_epoch,
        "selected_epoch": s.selected_epoch,
        "reduction": s.reduction,
    })
}

fn eval_value(r: &pipeline::EvalReport) -> Value {
    json!({
        "n": r.n,
        "accuracy": r.accuracy,
        "binary_accuracy": r.binary_accuracy,
        "sensitivity": r.sensitivity,
        "qwk": r.qwk.m,
        "mean_confidence_gap": r.kde.mean_gap,
    })
}
