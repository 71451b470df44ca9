//! Output directory bookkeeping and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const FAILED_MARKER: &str = "manifest.failed.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub exit_code: i32,
    pub outputs: Vec<OutputDigest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedRun {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: Option<String>,
    pub exit_code: i32,
    pub error: String,
    /// Files written before the failure; their contents are not trustworthy.
    pub partial_outputs: Vec<String>,
}

/// Output directory of one run. Files are registered as they are written so
/// the manifest can digest them.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

impl OutputDir {
    /// Creates `dir` and removes any manifest or failure marker of a
    /// previous run, so an interrupted run leaves neither behind.
    pub fn prepare(dir: &Path) -> Result<OutputDir, CliError> {
        std::fs::create_dir_all(dir)?;
        for stale in [MANIFEST, FAILED_MARKER] {
            match std::fs::remove_file(dir.join(stale)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    /// Path of an output file, registered for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        std::fs::write(self.file(name), text + "\n")?;
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn digests(&self) -> Result<Vec<OutputDigest>, CliError> {
        let mut names = self.files.clone();
        names.sort();
        names
            .into_iter()
            .map(|file| {
                let data = std::fs::read(self.dir.join(&file))?;
                Ok(OutputDigest {
                    sha256: hex(&Sha256::digest(&data)),
                    bytes: data.len() as u64,
                    file,
                })
            })
            .collect()
    }

    pub fn written(&self) -> Vec<String> {
        self.files.clone()
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        std::fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn write_failure(&self, failed: &FailedRun) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(failed).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        std::fs::write(self.dir.join(FAILED_MARKER), text + "\n")?;
        Ok(())
    }
}
