//! Output directory handling and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rgd_core::io::sha256_hex;
use rgd_core::{RunManifest, SolverParams};

use crate::commands::CliError;

/// Every result file names this file as its manifest.
pub const MANIFEST: &str = "manifest.json";

pub fn version() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("RGD_GIT_DESCRIBE"))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Write {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| CliError::Write {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, contents).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn manifest(
        &self,
        command: &str,
        args: &[String],
        seed: u64,
        solver: &SolverParams,
        inputs: &[&str],
    ) -> Result<(), CliError> {
        let joined: String = inputs.concat();
        let manifest = RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            solver: solver.clone(),
            input_sha256: sha256_hex(joined.as_bytes()),
            unix_time: timestamp(),
            version: version(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Usage(e.to_string()))?;
        text.push('\n');
        self.write(MANIFEST, &text)?;
        Ok(())
    }
}
