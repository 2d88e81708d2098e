//! `fibro`: synth, preprocess, train, predict and evaluate from one binary.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage or configuration
//! error. Logs go to stderr as `key=value` lines; set `RUST_LOG` to change
//! the level and `FIBRO_THREADS` to size the worker pool.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fibro_core::evaluate::{evaluate_task, predict, write_probabilities_csv, write_report};
use fibro_core::model::read_checkpoint_file;
use fibro_core::preprocess::{bundles_from_manifest, read_bundle_dir, read_manifest, write_bundle_file};
use fibro_core::synthetic::generate_dataset;
use fibro_core::training::train_cv;
use fibro_core::{CaseBundle, Task};
use thiserror::Error;

pub use config::{RunConfig, Scale};

/// Ensemble size the evaluation protocol expects.
pub const EXPECTED_ENSEMBLE: usize = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for {key}: {value} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            _ => 2,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "fibro", version, about = "Missing-modality-robust multimodal MRI staging", arg_required_else_help = true)]
pub struct Cli {
    /// Flat JSON file of dotted keys, e.g. {"train.lr": 1e-3}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: raw NIfTI, manifest.csv and bundles.
    Synth(SynthArgs),
    /// Turn a manifest of NIfTI files into .cbun bundles.
    Preprocess(PreprocessArgs),
    /// Stratified k-fold training, one checkpoint per fold.
    Train(TrainArgs),
    /// Class probabilities of one checkpoint.
    Predict(PredictArgs),
    /// Soft-voted ensemble metrics on labeled bundles.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<String>,
    /// Comma-separated, e.g. 16,16,16.
    #[arg(long)]
    pub extents: Option<String>,
    #[arg(long)]
    pub p_drop: Option<String>,
    #[arg(long)]
    pub contrast: Option<String>,
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base for relative manifest paths; defaults to the manifest's directory.
    #[arg(long)]
    pub input_dir: Option<PathBuf>,
    #[arg(long, alias = "out")]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub spacing: Option<String>,
    #[arg(long)]
    pub extents: Option<String>,
    #[arg(long)]
    pub drop_slices: Option<String>,
    #[arg(long, value_enum, default_value = "paper")]
    pub model_scale: Scale,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub folds: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub wd: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long, value_enum, default_value = "paper")]
    pub model_scale: Scale,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = EXPECTED_ENSEMBLE)]
    pub ensemble_size: usize,
    /// Also write the voted probabilities as CSV.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match with_pool(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("event=error code={} message={:?}", e.exit_code(), e.to_string());
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "ts={} level={} {}", buf.timestamp_millis(), record.level(), record.args()))
        .try_init();
}

/// Runs `f` on a dedicated pool when `FIBRO_THREADS` is set.
fn with_pool(f: impl FnOnce() -> Result<(), CliError> + Send) -> Result<(), CliError> {
    match std::env::var("FIBRO_THREADS") {
        Ok(raw) => {
            let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::BadValue {
                key: "FIBRO_THREADS".into(),
                value: raw.clone(),
                reason: "expected a positive integer".into(),
            })?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(failed)?;
            pool.install(f)
        }
        Err(_) => f(),
    }
}

fn parse_task(raw: &str) -> Result<Task, CliError> {
    raw.parse().map_err(|e: String| CliError::BadValue {
        key: "task".into(),
        value: raw.into(),
        reason: e.to_string(),
    })
}

fn push(flags: &mut Vec<(&'static str, String)>, key: &'static str, value: &Option<String>) {
    if let Some(v) = value {
        flags.push((key, v.clone()));
    }
}

fn log_config(command: &str, cfg: &RunConfig) {
    log::info!(
        "event=start command={command} seed={} config_hash={} config={}",
        cfg.seed,
        cfg.hash(),
        cfg.canonical_json()
    );
}

fn load_bundles(dir: &Path) -> Result<Vec<CaseBundle>, CliError> {
    let bundles = read_bundle_dir(dir).map_err(failed)?;
    if bundles.is_empty() {
        return Err(CliError::Failed(format!("no .cbun files in {}", dir.display())));
    }
    Ok(bundles)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Synth(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "synth.n_cases", &a.n);
            push(&mut flags, "synth.extents", &a.extents);
            push(&mut flags, "synth.p_drop", &a.p_drop);
            push(&mut flags, "synth.contrast", &a.contrast);
            push(&mut flags, "synth.noise", &a.noise);
            push(&mut flags, "seed", &a.seed);
            let cfg = RunConfig::resolve(Scale::Desk, Task::Cirrhosis, file, &flags)?;
            log_config("synth", &cfg);
            let summary = generate_dataset(&cfg.synth, &a.out).map_err(failed)?;
            log::info!(
                "event=done command=synth cases={} manifest={:?} bundles={:?}",
                summary.bundles.len(),
                summary.manifest.display().to_string(),
                summary.bundle_dir.display().to_string()
            );
        }
        Command::Preprocess(a) => {
            let mut flags = Vec::new();
            push(&mut flags, "preprocess.target_spacing", &a.spacing);
            push(&mut flags, "preprocess.target_extents", &a.extents);
            push(&mut flags, "preprocess.drop_leading_slices", &a.drop_slices);
            let cfg = RunConfig::resolve(a.model_scale, Task::Cirrhosis, file, &flags)?;
            log_config("preprocess", &cfg);
            let rows = read_manifest(&a.manifest).map_err(failed)?;
            let base = match &a.input_dir {
                Some(d) => d.clone(),
                None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let bundles = bundles_from_manifest(&rows, &base, &cfg.preprocess).map_err(failed)?;
            std::fs::create_dir_all(&a.output_dir).map_err(failed)?;
            for b in &bundles {
                write_bundle_file(a.output_dir.join(format!("{}.cbun", b.case_id)), b).map_err(failed)?;
            }
            log::info!("event=done command=preprocess cases={} extents={:?}", bundles.len(), cfg.preprocess.output_extents());
        }
        Command::Train(a) => {
            let task = parse_task(&a.task)?;
            let mut flags = Vec::new();
            push(&mut flags, "train.folds", &a.folds);
            push(&mut flags, "seed", &a.seed);
            push(&mut flags, "train.epochs", &a.epochs);
            push(&mut flags, "train.lr", &a.lr);
            push(&mut flags, "train.weight_decay", &a.wd);
            push(&mut flags, "train.patience", &a.patience);
            push(&mut flags, "train.batch_size", &a.batch);
            let cfg = RunConfig::resolve(a.model_scale, task, file, &flags)?;
            log_config("train", &cfg);
            let bundles = load_bundles(&a.bundles)?;
            let result = train_cv(&bundles, task, &cfg.model, &cfg.train, cfg.seed, Some(&a.out)).map_err(failed)?;
            for f in &result.folds {
                log::info!(
                    "event=fold fold={} best_epoch={} best_val_loss={:.6} epochs_run={}",
                    f.fold,
                    f.best_epoch,
                    f.best_val_loss,
                    f.history.len()
                );
            }
            log::info!("event=done command=train task={task} folds={} out={:?}", result.folds.len(), a.out.display().to_string());
        }
        Command::Predict(a) => {
            let model = read_checkpoint_file(&a.checkpoint).map_err(failed)?;
            log::info!("event=start command=predict checkpoint={:?}", a.checkpoint.display().to_string());
            let bundles = load_bundles(&a.bundles)?;
            let id = a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let preds = predict(&model, &bundles, &id, None).map_err(failed)?;
            write_probabilities_csv(&a.out, &preds).map_err(failed)?;
            log::info!("event=done command=predict cases={} out={:?}", bundles.len(), a.out.display().to_string());
        }
        Command::Evaluate(a) => {
            let task = parse_task(&a.task)?;
            if a.ensemble_size != EXPECTED_ENSEMBLE {
                log::warn!("event=warning ensemble_size={} expected={EXPECTED_ENSEMBLE}", a.ensemble_size);
            }
            if a.checkpoints.len() != a.ensemble_size {
                return Err(CliError::Failed(format!(
                    "got {} checkpoints but the ensemble size is {}",
                    a.checkpoints.len(),
                    a.ensemble_size
                )));
            }
            log::info!("event=start command=evaluate task={task} checkpoints={}", a.checkpoints.len());
            let models = a.checkpoints.iter().map(read_checkpoint_file).collect::<Result<Vec<_>, _>>().map_err(failed)?;
            let bundles = load_bundles(&a.bundles)?;
            let (report, votes) = evaluate_task(&models, &bundles, task).map_err(failed)?;
            write_report(&a.out, &report).map_err(failed)?;
            if let Some(p) = &a.probs {
                write_probabilities_csv(p, &votes).map_err(failed)?;
            }
            log::info!(
                "event=done command=evaluate task={task} n={} accuracy={:.6} auroc={}",
                report.n,
                report.accuracy,
                report.auroc.map_or("none".to_string(), |x| format!("{x:.6}"))
            );
        }
    }
    Ok(())
}
