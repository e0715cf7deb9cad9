//! Subcommands. Each one resolves its flags into a serializable settings
//! struct, which is what runs and what the manifest records.

mod compare;
mod data;
mod eval;
mod gradcam;
mod train;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{Command, ConfigFile, ReplayArgs};
use crate::manifest::{hash_path, manifest_path, FileHash, RunManifest};

pub use compare::CompareSettings;
pub use data::{IngestSettings, ResampleSettings, SynthSettings};
pub use eval::EvalSettings;
pub use gradcam::GradcamSettings;
pub use train::TrainSettings;

/// Failures with a dedicated exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Precondition(String),
    Diverged(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Precondition(m) => write!(f, "{m}"),
            Failure::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

pub fn precondition(msg: impl Into<String>) -> anyhow::Error {
    Failure::Precondition(msg.into()).into()
}

/// 1 usage, 2 data or precondition, 3 numerical divergence.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 1,
                Failure::Precondition(_) => 2,
                Failure::Diverged(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<admri::Error>() {
            return match e {
                admri::Error::InvalidArgument(_) => 1,
                admri::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    2
}

/// Shared context for resolving defaults.
pub struct Env {
    pub out_dir: PathBuf,
}

impl Env {
    pub fn default_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("--{flag} is required")))
}

/// What a finished run produced.
pub struct Outputs {
    pub files: Vec<PathBuf>,
    /// Set when training hit a non-finite loss; the files are still written.
    pub diverged: Option<String>,
}

impl Outputs {
    pub fn files(files: Vec<PathBuf>) -> Self {
        Self { files, diverged: None }
    }
}

pub trait Runnable: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn seed(&self) -> Option<u64>;
    fn inputs(&self) -> Vec<PathBuf>;
    /// Main output and whether it is a directory.
    fn primary(&self) -> (PathBuf, bool);
    /// Point every output into `dir`, keeping file names.
    fn redirect(&mut self, dir: &Path);
    fn run(&self) -> Result<Outputs>;
}

fn redirected(path: &Path, dir: &Path) -> PathBuf {
    dir.join(path.file_name().unwrap_or(path.as_os_str()))
}

/// Run, then write the manifest. Returns the recorded input and output hashes.
fn execute<C: Runnable>(settings: &C) -> Result<RunManifest> {
    let inputs = settings.inputs();
    let (primary, is_dir) = settings.primary();
    for input in &inputs {
        if !input.exists() {
            return Err(precondition(format!("input {} does not exist", input.display())));
        }
        if input == &primary {
            return Err(usage(format!("output {} would overwrite an input", primary.display())));
        }
    }
    let started_at = now();
    let input_hashes: Vec<FileHash> = inputs
        .iter()
        .map(|p| hash_path(p))
        .collect::<Result<Vec<_>>>()?
        .concat();
    if let Some(parent) = primary.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    if is_dir {
        fs::create_dir_all(&primary)?;
    }
    let outputs = settings.run()?;
    let output_hashes = outputs
        .files
        .iter()
        .map(|p| hash_path(p))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let manifest = RunManifest {
        command: C::NAME.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: settings.seed(),
        settings: serde_json::to_value(settings)?,
        started_at,
        finished_at: now(),
        inputs: input_hashes,
        outputs: output_hashes,
    };
    let mpath = manifest_path(&primary, is_dir);
    manifest.write(&mpath)?;
    log::info!("wrote {}", mpath.display());
    if let Some(msg) = outputs.diverged {
        return Err(Failure::Diverged(msg).into());
    }
    Ok(manifest)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn dispatch(command: Command, config: ConfigFile, env: &Env) -> Result<()> {
    match command {
        Command::Synth(a) => execute(&SynthSettings::resolve(a.overlay(config.synth), env)?).map(drop),
        Command::Ingest(a) => execute(&IngestSettings::resolve(a.overlay(config.ingest), env)?).map(drop),
        Command::Resample(a) => execute(&ResampleSettings::resolve(a.overlay(config.resample), env)?).map(drop),
        Command::Train(a) => execute(&TrainSettings::resolve(a.overlay(config.train), env)?).map(drop),
        Command::Eval(a) => execute(&EvalSettings::resolve(a.overlay(config.eval), env)?).map(drop),
        Command::Gradcam(a) => execute(&GradcamSettings::resolve(a.overlay(config.gradcam), env)?).map(drop),
        Command::Compare(a) => execute(&CompareSettings::resolve(a.overlay(config.compare), env)?).map(drop),
        Command::Replay(a) => replay(&a),
    }
}

fn replay_as<C: Runnable>(recorded: &RunManifest, into: &Path) -> Result<RunManifest> {
    let mut settings: C = serde_json::from_value(recorded.settings.clone())
        .with_context(|| format!("manifest settings do not fit the {} command", C::NAME))?;
    settings.redirect(into);
    execute(&settings)
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::read(&args.manifest)?;
    let into = match &args.into {
        Some(dir) => dir.clone(),
        None => args.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    fs::create_dir_all(&into)?;
    let fresh = match recorded.command.as_str() {
        SynthSettings::NAME => replay_as::<SynthSettings>(&recorded, &into)?,
        IngestSettings::NAME => replay_as::<IngestSettings>(&recorded, &into)?,
        ResampleSettings::NAME => replay_as::<ResampleSettings>(&recorded, &into)?,
        TrainSettings::NAME => replay_as::<TrainSettings>(&recorded, &into)?,
        EvalSettings::NAME => replay_as::<EvalSettings>(&recorded, &into)?,
        GradcamSettings::NAME => replay_as::<GradcamSettings>(&recorded, &into)?,
        CompareSettings::NAME => replay_as::<CompareSettings>(&recorded, &into)?,
        other => bail!(usage(format!("cannot replay unknown command {other:?}"))),
    };
    if fresh.inputs.len() != recorded.inputs.len()
        || fresh
            .inputs
            .iter()
            .zip(&recorded.inputs)
            .any(|(a, b)| a.git_blob_sha256 != b.git_blob_sha256)
    {
        return Err(precondition("inputs changed since the recorded run"));
    }
    let key = |h: &FileHash| h.path.file_name().map(|n| n.to_owned());
    let mut mismatched = Vec::new();
    for old in &recorded.outputs {
        match fresh.outputs.iter().find(|f| key(f) == key(old)) {
            Some(new) if new.git_blob_sha256 == old.git_blob_sha256 => {}
            _ => mismatched.push(old.path.display().to_string()),
        }
    }
    if !mismatched.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
        return Err(precondition(format!("replay differs in: {}", mismatched.join(", "))));
    }
    println!(
        "replay of {} reproduced {} output(s) in {}",
        recorded.command,
        fresh.outputs.len(),
        into.display()
    );
    Ok(())
}
