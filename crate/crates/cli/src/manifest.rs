//! Per-command record of what ran and what it produced.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    /// Checkpoint and patch files, identified by content hash.
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub duration: Duration,
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").expect("string write");
            s
        }))
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            checkpoints: Vec::new(),
            reports: Vec::new(),
            duration: Duration::ZERO,
        }
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.txt")
    }

    /// Every listed file must exist; the manifest itself is written last.
    pub fn render(&self) -> Result<String, CliError> {
        let mut s = String::new();
        writeln!(s, "command = {}", self.command).expect("string write");
        writeln!(s, "duration_secs = {:.3}", self.duration.as_secs_f64()).expect("string write");
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_text());
        s.push_str("\n[checkpoints]\n");
        for path in &self.checkpoints {
            let name = path
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            writeln!(s, "{name} = sha256:{}", file_digest(path)?).expect("string write");
        }
        s.push_str("\n[reports]\n");
        for path in &self.reports {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "manifest lists missing file {}",
                    path.display()
                )));
            }
            let name = path
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            writeln!(s, "{name}").expect("string write");
        }
        Ok(s)
    }

    pub fn write(&self) -> Result<PathBuf, CliError> {
        let path = self.config.out_dir.join(Self::file_name(&self.command));
        let text = self.render()?;
        fs::write(&path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}
