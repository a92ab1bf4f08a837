//! The `ctm` command-line driver.
//!
//! Every run parses a config file, executes one job, and writes its outputs
//! plus a `manifest.json` into a run directory. `ctm replay <manifest>` reruns
//! the recorded job and checks that every output is byte-identical.

pub mod commands;
pub mod manifest;
pub mod svg;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctm_core::config::RunConfig;
use manifest::{sha256_hex, InputFile, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ctm", version, about = "Consistency-trajectory distillation on toy Gaussian mixtures")]
pub struct Cli {
    /// Run config file (sectioned key = value); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Exact output directory (default: <runs-dir>/<timestamp>-<config hash>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(flatten)]
    Job(Job),
    /// Rerun the job recorded in a manifest and compare output hashes.
    Replay { manifest: PathBuf },
}

/// A reproducible unit of work; recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    /// Train the neural teacher denoiser.
    TrainTeacher,
    /// Distill the student from the teacher.
    Distill(TeacherArg),
    /// Draw samples from a student checkpoint.
    Sample(SampleArgs),
    /// Energy distance, condition accuracy and step trade-off tables.
    Eval(EvalArgs),
    /// Intensity-curve guidance experiments.
    Guide(GuideArgs),
    /// Train one student per distillation distance with shared seeds.
    AblateDistance(TeacherArg),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TeacherArg {
    /// Teacher checkpoint (required when teacher.kind = neural).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Label index or `null`.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GuideArgs {
    #[arg(long)]
    pub student: PathBuf,
    /// One target shape (default: all six).
    #[arg(long, value_parser = ["flat", "ramp-up", "ramp-down", "triangle", "vee", "sine"])]
    pub target_shape: Option<String>,
    /// One method (default: all three).
    #[arg(long, value_parser = ["loss-guidance", "zt-opt", "none"])]
    pub method: Option<String>,
    /// Number of seeds (chains) per shape and method.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Also write an SVG of target and achieved curves per shape.
    #[arg(long)]
    pub plot: bool,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::TrainTeacher => "train-teacher",
            Job::Distill(_) => "distill",
            Job::Sample(_) => "sample",
            Job::Eval(_) => "eval",
            Job::Guide(_) => "guide",
            Job::AblateDistance(_) => "ablate-distance",
        }
    }

    /// Input files by role.
    pub fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let mut v = Vec::new();
        match self {
            Job::TrainTeacher => {}
            Job::Distill(a) | Job::AblateDistance(a) => v.extend(a.teacher.as_deref().map(|p| ("teacher", p))),
            Job::Sample(a) => v.push(("student", a.student.as_path())),
            Job::Eval(a) => {
                v.push(("student", a.student.as_path()));
                v.extend(a.teacher.as_deref().map(|p| ("teacher", p)));
            }
            Job::Guide(a) => v.push(("student", a.student.as_path())),
        }
        v
    }

    fn absolutize(&mut self) -> Result<()> {
        let fix = |p: &mut PathBuf| -> Result<()> {
            *p = std::fs::canonicalize(&*p).with_context(|| format!("checkpoint not found: {}", p.display()))?;
            Ok(())
        };
        match self {
            Job::TrainTeacher => {}
            Job::Distill(a) | Job::AblateDistance(a) => {
                if let Some(p) = a.teacher.as_mut() {
                    fix(p)?;
                }
            }
            Job::Sample(a) => fix(&mut a.student)?,
            Job::Eval(a) => {
                fix(&mut a.student)?;
                if let Some(p) = a.teacher.as_mut() {
                    fix(p)?;
                }
            }
            Job::Guide(a) => fix(&mut a.student)?,
        }
        Ok(())
    }
}

/// A user-input problem outside the config file (exit code 1).
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

pub fn validation(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

/// Exit code for an error: 1 for validation problems, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<ctm_core::Error>() {
            if e.is_validation() {
                return EXIT_VALIDATION;
            }
        }
    }
    EXIT_RUNTIME
}

/// Result of one executed job.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn run_dir(out: Option<&Path>, runs_dir: &Path, config_hash: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
            runs_dir.join(format!("{stamp}-{}", &config_hash[..12]))
        }
    }
}

/// Runs `job` with the given config text and writes outputs and manifest.
///
/// A job that fails after producing partial outputs still writes them, then
/// returns an error.
pub fn execute(
    mut job: Job,
    config_text: &str,
    seed_override: Option<&str>,
    out: Option<&Path>,
    runs_dir: &Path,
) -> Result<RunRecord> {
    let cfg = RunConfig::parse(config_text, seed_override)?;
    job.absolutize()?;
    let mut inputs = BTreeMap::new();
    for (role, path) in job.inputs() {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        inputs.insert(
            role.to_string(),
            InputFile {
                path: path.to_path_buf(),
                sha256: sha256_hex(&bytes),
            },
        );
    }
    log::info!("running {} with seed {}", job.name(), cfg.seed);
    let output = commands::run_job(&job, &cfg)?;
    let config_sha256 = sha256_hex(config_text.as_bytes());
    let dir = run_dir(out, runs_dir, &config_sha256);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &output.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        outputs.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        tool: "ctm".into(),
        versions: Manifest::versions(),
        job,
        seed: cfg.seed,
        config_sha256,
        config_text: config_text.to_string(),
        inputs,
        outputs,
        failure: output.failure.clone(),
    };
    let mpath = dir.join(manifest::FILE_NAME);
    std::fs::write(&mpath, manifest.to_json()?).with_context(|| format!("cannot write {}", mpath.display()))?;
    if let Some(f) = output.failure {
        anyhow::bail!("{} failed (partial outputs in {}): {f}", manifest.job.name(), dir.display());
    }
    Ok(RunRecord { dir, manifest })
}

/// Reruns a manifest's job. Returns the new run and the names of outputs whose
/// hashes differ from the recorded ones.
pub fn replay(manifest_path: &Path, out: Option<&Path>, runs_dir: &Path) -> Result<(RunRecord, Vec<String>)> {
    let old = Manifest::load(manifest_path)?;
    for (role, input) in &old.inputs {
        let bytes = std::fs::read(&input.path)
            .with_context(|| format!("cannot read {role} checkpoint {}", input.path.display()))?;
        if sha256_hex(&bytes) != input.sha256 {
            anyhow::bail!("{role} checkpoint {} changed since the recorded run", input.path.display());
        }
    }
    let seed = old.seed.to_string();
    let rec = execute(old.job.clone(), &old.config_text, Some(&seed), out, runs_dir)?;
    let mut names: Vec<&String> = old.outputs.keys().chain(rec.manifest.outputs.keys()).collect();
    names.sort();
    names.dedup();
    let differing = names
        .into_iter()
        .filter(|n| old.outputs.get(*n) != rec.manifest.outputs.get(*n))
        .cloned()
        .collect();
    Ok((rec, differing))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Job(job) => {
            let text = match &cli.config {
                Some(p) => std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))
                    .map_err(|e| validation(format!("{e:#}")))?,
                None => String::new(),
            };
            let seed = std::env::var("SEED").ok();
            let rec = execute(job, &text, seed.as_deref(), cli.out.as_deref(), &cli.runs_dir)?;
            println!("{}", rec.dir.display());
            Ok(EXIT_OK)
        }
        Command::Replay { manifest } => {
            let (rec, differing) = replay(&manifest, cli.out.as_deref(), &cli.runs_dir)?;
            println!("{}", rec.dir.display());
            if differing.is_empty() {
                println!("replay: all {} outputs identical", rec.manifest.outputs.len());
                Ok(EXIT_OK)
            } else {
                eprintln!("replay: outputs differ: {}", differing.join(", "));
                Ok(EXIT_RUNTIME)
            }
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
