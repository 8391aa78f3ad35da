use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use qelab::data::DataError;
use qelab::numerics::Fnv64;
use qelab::prompting::{PromptError, ScorerError};
use qelab::qe_head::QeError;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CREDENTIALS: u8 = 3;

/// Bad configuration or input data.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Missing API credentials.
#[derive(Debug)]
pub struct CredentialError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for CredentialError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for CredentialError {}

/// Maps an error chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CredentialError>() || matches!(cause.downcast_ref::<ScorerError>(), Some(ScorerError::MissingApiKey)) {
            return EXIT_CREDENTIALS;
        }
        if let Some(PromptError::ClientUnavailable { last: ScorerError::MissingApiKey, .. }) = cause.downcast_ref::<PromptError>() {
            return EXIT_CREDENTIALS;
        }
    }
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<DataError>() {
            return EXIT_USAGE;
        }
        match cause.downcast_ref::<QeError>() {
            Some(QeError::InvalidConfig(_) | QeError::EmptyDataset | QeError::EmptyInput | QeError::Format(_)) => return EXIT_USAGE,
            _ => {}
        }
        match cause.downcast_ref::<PromptError>() {
            Some(PromptError::ClientUnavailable { .. } | PromptError::Io { .. }) | None => {}
            Some(_) => return EXIT_USAGE,
        }
    }
    EXIT_INTERNAL
}

/// `command` and `method` of a finished run, read back by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub method: String,
}

pub struct RunDir {
    pub path: PathBuf,
}

/// FNV-1a of the resolved config's JSON, as 8 hex digits.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut h = Fnv64::default();
    h.write_bytes(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    format!("{:08x}", h.finish() as u32)
}

impl RunDir {
    /// Creates `<output_dir>/<command>-<timestamp>-<hash>`, adding a numeric
    /// suffix instead of reusing an existing directory, and writes the
    /// resolved config into it.
    pub fn create(command: &str, cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}-{}", config_hash(cfg));
        let mut suffix = 0usize;
        let path = loop {
            let name = if suffix == 0 { base.clone() } else { format!("{base}-{suffix}") };
            let path = cfg.output_dir.join(name);
            match fs::create_dir(&path) {
                Ok(()) => break path,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => suffix += 1,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        };
        let dir = Self { path };
        dir.write_json("config.json", cfg)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text + "\n")
    }

    /// Writes a new file; refuses to replace one.
    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        write_new(&self.file(name), contents.as_ref())
    }

    pub fn finish(&self, command: &str, method: &str) -> anyhow::Result<()> {
        self.write_json("run.json", &RunInfo { command: command.into(), method: method.into() })
    }
}

pub fn write_new(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    use std::io::Write as _;
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// A file name fragment safe on every platform.
pub fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
