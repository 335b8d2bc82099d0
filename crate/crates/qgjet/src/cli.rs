//! The `qgjet` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 numeric degeneracy.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use qgjet_core::detector::Channel;
use qgjet_core::models::{Classifier, ModelError};
use qgjet_core::preprocess::{compute_channel_stats, preprocess_window, PreprocConfig, PreprocError};
use qgjet_core::synth::{generate_dataset, Separability, SynthConfig, SynthError};
use qgjet_core::tensor::ParameterRegistry;
use qgjet_core::train::{evaluate, EpochRecord, MetricError, Sample, TrainError};
use qgjet_core::Label;

use crate::config::{ConfigError, RunConfig};
use crate::format::{read_checkpoint, read_dataset, restore, write_checkpoint, write_dataset, FormatError};
use crate::pipeline::{split, train_seeds};
use crate::render::{render_intensity_map, write_pgm, RenderError, Scale};
use crate::report::{write_metrics_csv, ReportError};
use crate::runtime::{executor, StdClock};
use crate::stats_file::{read_stats, write_stats, StatsFileError};
use crate::sweep::{run_sweep, SweepAxis, SweepError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

fn context(path: &Path) -> impl Fn(String) -> String + '_ {
    move |m| format!("{}: {m}", path.display())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PreprocError> for CliError {
    fn from(e: PreprocError) -> Self {
        match e {
            PreprocError::DegenerateChannel { .. } => CliError::Numeric(e.to_string()),
            PreprocError::InvalidConfig => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::SingleClass => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Model(ModelError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Metric(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Train(t) => t.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "qgjet", version, about = "Quark/gluon jet-image classification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labelled synthetic jet windows.
    Synth {
        #[arg(long, value_parser = ["easy", "paperlike", "hard"])]
        preset: String,
        /// Windows per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel mean and standard deviation of a training set.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero suppression, standardization, clipping and min-max scaling.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and write checkpoints and a metrics table.
    Train {
        /// Preprocessed dataset file, or a directory with train.jqg and val.jqg.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["vit", "conv", "hybrid2", "hybrid3"])]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// A seed count N (seeds 0..N) or a comma-separated seed list.
        #[arg(long)]
        seeds: Option<String>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a preprocessed dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.txt beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Vary one setting with everything else fixed.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["vit", "conv", "hybrid2", "hybrid3"])]
        model: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average intensity map of one class and channel as a PGM image.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["q", "g"])]
        label: String,
        #[arg(long, value_parser = ["track", "ecal", "hcal"])]
        channel: String,
        #[arg(long, value_parser = ["log", "linear"], default_value = "linear")]
        scale: String,
        /// Defaults to mean_<label>_<channel>_<scale>.pgm.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<Vec<Sample>, CliError> {
    read_dataset(path).map_err(|e: FormatError| CliError::Data(context(path)(e.to_string())))
}

fn resolve_config(config: Option<&Path>, model: Option<&str>, seeds: Option<&str>, set: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = config {
        let text = fs::read_to_string(p).map_err(|e| CliError::Usage(context(p)(e.to_string())))?;
        cfg.apply_text(&text).map_err(|e| CliError::Usage(context(p)(e.to_string())))?;
    }
    if let Some(m) = model {
        cfg.set("model", m)?;
    }
    if let Some(s) = seeds {
        match s.parse::<u64>() {
            Ok(n) if !s.contains(',') => cfg.train.seeds = (0..n).collect(),
            _ => cfg.set("seeds", s)?,
        }
    }
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A directory holds `train.jqg` and `val.jqg`; a single file is split.
fn load_train_val(data: &Path, cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    if data.is_dir() {
        Ok((load(&data.join("train.jqg"))?, load(&data.join("val.jqg"))?))
    } else {
        Ok(split(&load(data)?, cfg.val_fraction, cfg.train.seeds[0]))
    }
}

fn progress(tag: &str, e: &EpochRecord) {
    eprintln!(
        "{tag} epoch {:>3}  train {:.4}  val {:.4}  auc {:.4}  acc {:.4}  trainable {}  {:.1}s",
        e.epoch, e.train_loss, e.val_loss, e.report.roc_auc, e.report.accuracy, e.trainable_params, e.seconds
    );
}

fn history_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,accuracy,precision,recall,f1,roc_auc,head_lr,unfrozen_lr,trainable_params,steps,seconds\n");
    for e in epochs {
        let r = &e.report;
        out += &format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{:?}\n",
            e.epoch, e.train_loss, e.val_loss, r.accuracy, r.precision, r.recall, r.f1, r.roc_auc, e.lr.head, e.lr.unfrozen, e.trainable_params, e.steps, e.seconds
        );
    }
    out
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { preset, n, seed, out } => {
            let sep = Separability::parse(&preset).expect("clap restricts presets");
            let windows = generate_dataset(&SynthConfig::preset(sep, seed), n)?;
            let samples: Vec<Sample> = windows.into_iter().map(|w| Sample { label: w.label.expect("generated windows are labelled"), image: w.image }).collect();
            write_dataset(&out, &samples).map_err(|e| CliError::Data(e.to_string()))?;
            eprintln!("wrote {} windows to {}", samples.len(), out.display());
        }
        Command::Stats { train, out } => {
            let samples = load(&train)?;
            let stats = compute_channel_stats(samples.iter().map(|s| &s.image), &PreprocConfig::default())?;
            write_stats(&out, &stats).map_err(|e: StatsFileError| CliError::Data(e.to_string()))?;
        }
        Command::Preprocess { input, stats, out } => {
            let samples = load(&input)?;
            let stats = read_stats(&stats).map_err(|e| CliError::Data(e.to_string()))?;
            let cfg = PreprocConfig::default();
            let processed = samples
                .iter()
                .map(|s| Ok(Sample { image: preprocess_window(&s.image, &stats, &cfg)?, label: s.label }))
                .collect::<Result<Vec<_>, PreprocError>>()?;
            write_dataset(&out, &processed).map_err(|e| CliError::Data(e.to_string()))?;
        }
        Command::Train { data, model, config, seeds, set, out } => {
            let cfg = resolve_config(config.as_deref(), model.as_deref(), seeds.as_deref(), &set)?;
            let (train, val) = load_train_val(&data, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let (exec, clock) = (executor(), StdClock::new());
            let name = cfg.spec.kind.name();
            let outcome = train_seeds(name, &cfg, &train, &val, exec.as_ref(), &clock, &mut |seed, e| progress(&format!("{name} seed {seed}"), e))?;
            for run in &outcome.runs {
                let seed = run.record.seed;
                write_checkpoint(&out.join(format!("seed{seed}.jqgc")), &run.best).map_err(|e| CliError::Data(e.to_string()))?;
                fs::write(out.join(format!("history_seed{seed}.csv")), history_csv(&run.record.epochs))?;
            }
            write_metrics_csv(std::slice::from_ref(&outcome.row), &out.join("metrics.csv"))?;
            print!("{}", crate::report::metrics_csv(std::slice::from_ref(&outcome.row))?);
        }
        Command::Eval { checkpoint, data, config } => {
            let config = config.or_else(|| checkpoint.parent().map(|p| p.join("config.txt")).filter(|p| p.exists()));
            let cfg = resolve_config(config.as_deref(), None, None, &[])?;
            let ckpt = read_checkpoint(&checkpoint).map_err(|e| CliError::Data(context(&checkpoint)(e.to_string())))?;
            let mut reg = ParameterRegistry::<f32>::new();
            let model = Classifier::build(&cfg.spec, &mut reg, 0).map_err(TrainError::from)?;
            restore(&mut reg, &ckpt).map_err(|e| CliError::Data(context(&checkpoint)(e.to_string())))?;
            let samples = load(&data)?;
            let eval = evaluate(&model, &reg, &samples, cfg.train.batch_size, executor().as_ref())?;
            let r = &eval.report;
            println!("samples: {}", samples.len());
            println!("loss: {:.6}", eval.loss);
            for (k, v) in [("accuracy", r.accuracy), ("precision", r.precision), ("recall", r.recall), ("f1", r.f1), ("roc_auc", r.roc_auc)] {
                println!("{k}: {v:.4}");
            }
            let c = &r.confusion;
            println!("confusion: tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_);
            if r.degenerate {
                return Err(CliError::Numeric("evaluation set holds a single class; ROC-AUC is undefined".into()));
            }
        }
        Command::Sweep { axis, values, data, model, config, set, out } => {
            let axis = SweepAxis::parse(&axis)?;
            let cfg = resolve_config(config.as_deref(), model.as_deref(), None, &set)?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            crate::sweep::plan(&cfg, axis, &values)?;
            let (train, val) = load_train_val(&data, &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let (exec, clock) = (executor(), StdClock::new());
            let rows = run_sweep(&cfg, axis, &values, &train, &val, exec.as_ref(), &clock, &mut |tag, e| progress(tag, e))?;
            let path = out.join(format!("sweep_{}.csv", axis.name()));
            write_metrics_csv(&rows, &path)?;
            print!("{}", crate::report::metrics_csv(&rows)?);
        }
        Command::Render { data, label, channel, scale, out } => {
            let samples = load(&data)?;
            let lab = if label == "q" { Label::Quark } else { Label::Gluon };
            let ch = match channel.as_str() {
                "track" => Channel::Track,
                "ecal" => Channel::Ecal,
                _ => Channel::Hcal,
            };
            let sc = Scale::parse(&scale).expect("clap restricts scales");
            let image = render_intensity_map(&samples, lab, ch, sc)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("mean_{label}_{channel}_{scale}.pgm")));
            write_pgm(&out, &image)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
