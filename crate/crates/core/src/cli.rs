//! The `icth` command-line interface.
//!
//! Every subcommand reads an optional JSON config, runs one library
//! operation and writes its output atomically. Exit codes: 0 success,
//! 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    read_groups, read_raw, reconstruct_missing_counts, write_groups, Cascade,
    CascadeGroup,
};
use crate::eval::{
    downsample_groups, export_embeddings, run_downsampling_benchmark, BenchOptions, EmbeddingRow,
    SyntheticBenchConfig,
};
use crate::neural::{group_embedding, IcthConfig, IcthModel};
use crate::parametric::{fit, simulate, Family, FitConfig, ModelFile, SimulateOptions};
use crate::training::{
    finetune_classify, finetune_popularity, grad_check, pretrain, tiny_model, ContrastiveConfig,
    GradCheckTarget, HeadConfig, HeadTask,
};
use crate::{json, rng, Error, Result};

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "icth", version, about = "Interval-censored transformer Hawkes toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; defaults are used for missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate cascades from a parametric model into a group file.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the model family of the config.
        #[arg(long, value_parser = parse_family)]
        family: Option<Family>,
    },
    /// Rebuild interval-censored cascades from raw observations.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "reconstructed")]
        group_id: String,
    },
    /// Remove point events at random, keeping their counts.
    Downsample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        p_missing: f64,
    },
    /// Fit a parametric model to every cascade of a group file.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Contrastive pre-training of the neural model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Per-epoch metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train a group classifier on top of a checkpoint.
    FinetuneClassify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the fine-tuned checkpoint here.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Train a final-popularity regressor on top of a checkpoint.
    FinetunePopularity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Run the synthetic down-sampling benchmark.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Directory for per-level embedding files.
        #[arg(long)]
        embeddings_dir: Option<PathBuf>,
        /// Include wall-clock runtimes in the report.
        #[arg(long)]
        timings: bool,
    },
    /// Export group embeddings as TSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Use the built-in tiny model.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown family `{s}` (hawkes, hawkesn, mbp)"))
}

/// `simulate` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelFile,
    pub horizon: f64,
    pub n_cascades: usize,
    pub max_events: Option<usize>,
    pub group_id: String,
    pub label: Option<String>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            model: ModelFile {
                family: Family::Hawkes,
                kernel: crate::parametric::KernelKind::Exponential,
                mu: 0.0,
                kappa: 0.5,
                theta: 1.0,
                c: None,
                n: None,
                fit_ll: None,
                immigrant: true,
            },
            horizon: 50.0,
            n_cascades: 10,
            max_events: Some(10_000),
            group_id: "sim".into(),
            label: None,
            seed: 0,
        }
    }
}

/// `fit` config: the starting point and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitFile {
    pub init: ModelFile,
    pub fit: FitConfig,
}

impl Default for FitFile {
    fn default() -> Self {
        FitFile {
            init: SimulateConfig::default().model,
            fit: FitConfig::default(),
        }
    }
}

/// `pretrain` config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainFile {
    pub model: IcthConfig,
    pub model_seed: u64,
    pub training: ContrastiveConfig,
}

/// `benchmark` config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkFile {
    pub synthetic: SyntheticBenchConfig,
    pub training: ContrastiveConfig,
}

/// `gradcheck` config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckFile {
    pub targets: Vec<GradCheckTarget>,
    pub seed: u64,
}

impl Default for GradcheckFile {
    fn default() -> Self {
        GradcheckFile {
            targets: GradCheckTarget::ALL.to_vec(),
            seed: 0,
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&json::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn head_config(path: Option<&Path>, task: HeadTask) -> Result<HeadConfig> {
    let mut v: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&json::read_to_string(p)?)?,
        None => serde_json::json!({}),
    };
    if let Some(obj) = v.as_object_mut() {
        obj.entry("task").or_insert(serde_json::to_value(task)?);
    }
    Ok(serde_json::from_value(v)?)
}

fn log_config<T: Serialize>(name: &str, cfg: &T) -> Result<()> {
    log::info!("{name} config: {}", json::to_line(cfg)?);
    Ok(())
}

fn out_path(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::invalid("--out is required"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    json::write_atomic(path, text.as_bytes())
}

fn json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = json::to_line(value)?;
    s.push('\n');
    write_text(path, &s)
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::InvalidCascade { .. }
        | Error::Parse { .. }
        | Error::DuplicateGroup(_)
        | Error::SequenceTooLong { .. }
        | Error::Shape { .. }
        | Error::Json(_) => 1,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::Io { .. } => 2,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let verbose = common(&cli.command).verbose;
    let _ = env_logger::Builder::new()
        .filter_level(if verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Info
        })
        .parse_env("ICTH_LOG")
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn common(c: &Command) -> &Common {
    match c {
        Command::Simulate { common, .. }
        | Command::Reconstruct { common, .. }
        | Command::Downsample { common, .. }
        | Command::Fit { common, .. }
        | Command::Pretrain { common, .. }
        | Command::FinetuneClassify { common, .. }
        | Command::FinetunePopularity { common, .. }
        | Command::Benchmark { common, .. }
        | Command::Embed { common, .. }
        | Command::Gradcheck { common, .. } => common,
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    let common = common(cmd);
    let cfg_path = common.config.as_deref();
    match cmd {
        Command::Simulate { family, .. } => {
            let mut cfg: SimulateConfig = load_config(cfg_path)?;
            if let Some(f) = family {
                cfg.model.family = *f;
            }
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            log_config("simulate", &cfg)?;
            let out = out_path(common)?;
            let model = cfg.model.model()?;
            let opts = SimulateOptions {
                max_events: cfg.max_events,
            };
            let cascades = (0..cfg.n_cascades)
                .map(|i| {
                    let mut c = simulate(&model, cfg.horizon, rng::derive_seed(cfg.seed, i as u64), &opts)?.tiled();
                    c.id = format!("{}-{i}", cfg.group_id);
                    Ok(c)
                })
                .collect::<Result<Vec<Cascade>>>()?;
            write_groups(&[CascadeGroup::new(cfg.group_id.clone(), cfg.label.clone(), cascades)], out)?;
        }
        Command::Reconstruct { input, group_id, .. } => {
            let out = out_path(common)?;
            let mut cascades = Vec::new();
            for r in read_raw(input)? {
                let (c, warnings) = reconstruct_missing_counts(&r.cascade_id, &r.events, r.horizon)?;
                for w in warnings {
                    log::warn!(
                        "cascade `{}` observation {}: {} (missing {}, adjusted by {})",
                        r.cascade_id,
                        w.index,
                        w.reason,
                        w.raw_missing,
                        w.adjustment
                    );
                }
                cascades.push(c);
            }
            write_groups(&[CascadeGroup::new(group_id.clone(), None, cascades)], out)?;
        }
        Command::Downsample { input, p_missing, .. } => {
            let out = out_path(common)?;
            let seed = common.seed.unwrap_or(0);
            log::info!("downsample config: p_missing {p_missing} seed {seed}");
            let groups = read_groups(input)?;
            let groups = downsample_groups(&groups, *p_missing, seed)?;
            write_groups(&groups, out)?;
        }
        Command::Fit { input, .. } => {
            let mut cfg: FitFile = load_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.fit.seed = s;
            }
            log_config("fit", &cfg)?;
            let out = out_path(common)?;
            let cascades: Vec<Cascade> = read_groups(input)?
                .into_iter()
                .flat_map(|g| g.cascades)
                .map(|c| if cfg.init.family == Family::Mbp { c } else { events_only(c) })
                .collect();
            let report = fit(&cascades, &cfg.init.model()?, &cfg.fit)?;
            log::info!("fit: {} iterations, converged {}", report.iterations, report.converged);
            json_file(out, &ModelFile::new(&report.model, Some(report.log_likelihood)))?;
        }
        Command::Pretrain { input, init, metrics, .. } => {
            let mut cfg: PretrainFile = load_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.model_seed = s;
                cfg.training.seed = s;
            }
            log_config("pretrain", &cfg)?;
            let out = out_path(common)?;
            let groups = read_groups(input)?;
            let mut model = match init {
                Some(p) => IcthModel::load(p)?,
                None => IcthModel::new(cfg.model.clone(), cfg.model_seed)?,
            };
            let report = pretrain(&mut model, &groups, &cfg.training)?;
            if let Some(m) = metrics {
                let mut text = String::new();
                for e in &report.metrics {
                    text.push_str(&json::to_line(e)?);
                    text.push('\n');
                }
                write_text(m, &text)?;
            }
            model.save(out)?;
        }
        Command::FinetuneClassify { input, checkpoint, save_model, .. } => {
            let mut cfg = head_config(cfg_path, HeadTask::Classify)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            log_config("finetune-classify", &cfg)?;
            let out = out_path(common)?;
            let groups = read_groups(input)?;
            let mut model = IcthModel::load(checkpoint)?;
            let report = finetune_classify(&mut model, &groups, &cfg)?;
            json_file(out, &report)?;
            if let Some(p) = save_model {
                model.save(p)?;
            }
        }
        Command::FinetunePopularity { input, checkpoint, save_model, .. } => {
            let mut cfg = head_config(cfg_path, HeadTask::Popularity)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            log_config("finetune-popularity", &cfg)?;
            let out = out_path(common)?;
            let cascades: Vec<Cascade> = read_groups(input)?.into_iter().flat_map(|g| g.cascades).collect();
            let mut model = IcthModel::load(checkpoint)?;
            let report = finetune_popularity(&mut model, &cascades, &cfg)?;
            json_file(out, &report)?;
            if let Some(p) = save_model {
                model.save(p)?;
            }
        }
        Command::Benchmark { embeddings_dir, timings, .. } => {
            let mut cfg: BenchmarkFile = load_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.synthetic.seed = s;
                cfg.training.seed = s;
            }
            log_config("benchmark", &cfg)?;
            let out = out_path(common)?;
            let opts = BenchOptions {
                export_dir: embeddings_dir.clone(),
                timings: *timings,
            };
            let report = run_downsampling_benchmark(&cfg.synthetic, &cfg.training, &opts)?;
            json_file(out, &report)?;
        }
        Command::Embed { input, checkpoint, .. } => {
            let out = out_path(common)?;
            let model = IcthModel::load(checkpoint)?;
            let rows = read_groups(input)?
                .iter()
                .map(|g| {
                    Ok(EmbeddingRow {
                        group_id: g.group_id.clone(),
                        label: g.label.clone().unwrap_or_default(),
                        values: group_embedding(&model, g)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            export_embeddings(&rows, out)?;
        }
        Command::Gradcheck { tiny, checkpoint, step, .. } => {
            let mut cfg: GradcheckFile = load_config(cfg_path)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            log_config("gradcheck", &cfg)?;
            let model = match (checkpoint, tiny) {
                (Some(p), false) => IcthModel::load(p)?,
                (None, true) => tiny_model(cfg.seed),
                _ => return Err(Error::invalid("pass exactly one of --tiny and --checkpoint")),
            };
            let mut lines = String::new();
            let mut worst: f64 = 0.0;
            for &t in &cfg.targets {
                let r = grad_check(&model, t, *step, cfg.seed)?;
                worst = worst.max(r.max_rel_error);
                lines.push_str(&json::to_line(&r)?);
                lines.push('\n');
            }
            print!("{lines}");
            println!("max relative error {worst:.3e}");
            if let Some(out) = &common.out {
                write_text(out, &lines)?;
            }
            if !(worst < GRADCHECK_TOLERANCE) {
                eprintln!("gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}");
                return Ok(2);
            }
        }
    }
    Ok(0)
}

/// Keeps only the point events; count-only records are dropped.
fn events_only(c: Cascade) -> Cascade {
    if !c.has_intervals() {
        return c;
    }
    Cascade {
        records: c.records.into_iter().filter(|r| r.is_event()).collect(),
        ..c
    }
}
