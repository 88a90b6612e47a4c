//! Command-line entry point: `gen`, `train`, `eval` and `compare`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, ECHO_FILE};
use crate::degrade::parse_conditions;
use crate::detector::{load_params, ParamFileError};
use crate::evaluator::{
    compare, export_features, format_compare, format_table, read_report, sweep, write_report, EvalError, EvalReport,
    LevelSelector, REPORT_FILE,
};
use crate::synthdata::{generate_dataset, load_dataset, DataError, Dataset, MANIFEST};
use crate::trainer::{train, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ParamFileError> for CliError {
    fn from(e: ParamFileError) -> Self {
        match e {
            ParamFileError::Io { .. } | ParamFileError::Format { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::ParamFile(p) => p.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Format { .. } => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "rgbt", version, about = "Two-stream RGB-thermal detector robust to modality imbalance")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Gen(GenArgs),
    /// Train a detector (full framework or an ablation).
    Train(TrainArgs),
    /// Evaluate a checkpoint under test conditions.
    Eval(EvalArgs),
    /// Compare two evaluation reports (B relative to A).
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_train: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_test: Option<u64>,
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunDirArgs {
    /// Exact output directory.
    #[arg(long, conflicts_with = "runs_root")]
    pub run_dir: Option<PathBuf>,
    /// Parent of the `<timestamp>-seed<seed>` directory created otherwise.
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset root written by `gen` (or its `train/` directory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Remove the quality-mask interaction modules.
    #[arg(long)]
    pub no_interaction: bool,
    /// Train on clean inputs only.
    #[arg(long)]
    pub no_degrade: bool,
    /// Supervised training of a single detector, without base model or consistency.
    #[arg(long)]
    pub no_aux: bool,
    /// Weight of the consistency term.
    #[arg(long, conflicts_with = "no_aux")]
    pub consistency_weight: Option<f64>,
    #[command(flatten)]
    pub out: RunDirArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Parameter file; `config.echo` next to it is used when `--config` is absent.
    pub checkpoint: PathBuf,
    /// Dataset root written by `gen` (or its `test/` directory).
    pub dataset: PathBuf,
    /// Test conditions; defaults to the configured list.
    pub conditions: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write per-positive neck features to this CSV file.
    #[arg(long)]
    pub export_features: Option<PathBuf>,
    /// Restrict the feature export to one pyramid level (0 = finest).
    #[arg(long, requires = "export_features")]
    pub level: Option<usize>,
    #[command(flatten)]
    pub out: RunDirArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report A (`report.json` or its directory).
    pub a: PathBuf,
    /// Report B.
    pub b: PathBuf,
}

fn load_config(arg: &ConfigArg, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
    match (&arg.config, fallback) {
        (Some(p), _) => Ok(RunConfig::load(p)?),
        (None, Some(p)) if p.is_file() => Ok(RunConfig::load(p)?),
        _ => Ok(RunConfig::default()),
    }
}

fn resolve_split(dir: &Path, split: &str) -> Result<PathBuf, CliError> {
    let nested = dir.join(split);
    if nested.join(MANIFEST).is_file() {
        Ok(nested)
    } else if dir.join(MANIFEST).is_file() {
        Ok(dir.to_path_buf())
    } else {
        Err(CliError::Usage(format!("no dataset at {} (expected {split}/{MANIFEST})", dir.display())))
    }
}

fn run_dir(args: &RunDirArgs, seed: u64) -> PathBuf {
    match &args.run_dir {
        Some(d) => d.clone(),
        None => args
            .runs_root
            .join(format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"))),
    }
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let p = dir.join(ECHO_FILE);
    fs::write(&p, cfg.echo()).map_err(|e| io_error(&p, e))
}

fn check_classes(cfg: &RunConfig, data: &Dataset) -> Result<(), CliError> {
    if data.num_classes() != cfg.model.num_classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            cfg.model.num_classes
        )));
    }
    Ok(())
}

pub fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config, None)?;
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    if let Some(n) = args.n_train {
        cfg.gen.n_train = n as usize;
    }
    if let Some(n) = args.n_test {
        cfg.gen.n_test = n as usize;
    }
    cfg.validate()?;
    if cfg.gen.n_train == 0 || cfg.gen.n_test == 0 {
        return Err(CliError::Usage("gen.n_train and gen.n_test must be positive".into()));
    }
    let g = generate_dataset(&cfg.scene, cfg.gen.n_train, cfg.gen.n_test, &args.out)?;
    write_echo(&args.out, &cfg)?;
    println!("train: {} samples, manifest {}", g.train.count, args.out.join("train").join(MANIFEST).display());
    println!("test:  {} samples, manifest {}", g.test.count, args.out.join("test").join(MANIFEST).display());
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(&args.config, None)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.no_interaction {
        cfg.model.interaction = false;
    }
    if args.no_degrade {
        cfg.train.pseudo_degrade = false;
    }
    if args.no_aux {
        cfg.train.aux = false;
        cfg.train.consistency = false;
    }
    if let Some(w) = args.consistency_weight {
        cfg.train.weights.consist = w;
    }
    cfg.validate()?;
    let split = resolve_split(&args.data, "train")?;
    let data = load_dataset(&split)?;
    check_classes(&cfg, &data)?;

    let dir = run_dir(&args.out, cfg.train.seed);
    write_echo(&dir, &cfg)?;
    let steps_per_epoch = data.pairs.len().div_ceil(cfg.train.batch_size).max(1);
    let mut epoch_sum = 0.0;
    let outcome = train(&cfg.model, &cfg.train, &cfg.degrade, &data.pairs, |m| {
        epoch_sum += m.losses.l_total;
        if (m.step + 1) % steps_per_epoch == 0 {
            eprintln!(
                "epoch {:>3}  mean loss {:.4}",
                (m.step + 1) / steps_per_epoch,
                epoch_sum / steps_per_epoch as f64
            );
            epoch_sum = 0.0;
        }
    })?;
    outcome.persist(&dir)?;
    let deliverable = dir.join(TrainOutcome::deliverable_name(&cfg.train));
    println!("{} steps; deliverable checkpoint {}", outcome.log.len(), deliverable.display());
    Ok(dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf, CliError> {
    let echo = args.checkpoint.parent().map(|p| p.join(ECHO_FILE));
    let mut cfg = load_config(&args.config, echo.as_deref())?;
    if let Some(s) = args.seed {
        cfg.eval.seed = s;
    }
    if !args.conditions.is_empty() {
        cfg.eval.conditions = args.conditions.clone();
    }
    let conditions = parse_conditions(&cfg.eval.conditions).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate()?;
    let split = resolve_split(&args.dataset, "test")?;
    let bytes = fs::read(&args.checkpoint).map_err(|e| io_error(&args.checkpoint, e))?;
    let params = load_params(&args.checkpoint, &cfg.model)?;
    let data = load_dataset(&split)?;
    check_classes(&cfg, &data)?;

    let reports = sweep(&params, &data.pairs, &conditions, &data.manifest.classes, &cfg.eval)?;
    let report = EvalReport {
        checkpoint_sha256: sha256_hex(&bytes),
        config_echo: cfg.echo(),
        conditions: reports,
    };
    let dir = run_dir(&args.out, cfg.eval.seed);
    write_echo(&dir, &cfg)?;
    write_report(&dir, &report)?;
    if let Some(path) = &args.export_features {
        let sel = args.level.map_or(LevelSelector::All, LevelSelector::Level);
        let csv = export_features(&params, &data.pairs, sel)?;
        fs::write(path, csv).map_err(|e| io_error(path, e))?;
    }
    println!("checkpoint sha256 {}", report.checkpoint_sha256);
    print!("{}", format_table(&report.conditions));
    println!("report {}", dir.join(REPORT_FILE).display());
    Ok(dir)
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(REPORT_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let a = read_report(&report_path(&args.a))?;
    let b = read_report(&report_path(&args.b))?;
    print!("{}", format_compare(&compare(&a, &b)?));
    Ok(())
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 1;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
