//! Output directory handling, atomic writes and the run manifest.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation. Everything except `wall_clock_seconds`
/// is a function of the inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical arguments and the bytes of every input file.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub tolerances: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    /// `--out` wins, then `OUT_DIR`, then `./out`.
    pub fn resolve(flag: Option<&Path>) -> Result<Self, CliError> {
        let dir = match (flag, std::env::var_os("OUT_DIR")) {
            (Some(d), _) => d.to_path_buf(),
            (None, Some(d)) => PathBuf::from(d),
            (None, None) => PathBuf::from("out"),
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::input(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let fail = |e: std::io::Error| CliError::runtime(format!("writing {name}: {e}"));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(fail)?;
        tmp.write_all(contents.as_bytes()).map_err(fail)?;
        tmp.as_file().sync_all().map_err(fail)?;
        tmp.persist(self.dir.join(name)).map_err(|e| fail(e.error))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    pub fn finish(
        mut self,
        command: &str,
        config_hash: String,
        seeds: Vec<u64>,
        tolerances: BTreeMap<String, f64>,
        started: std::time::Instant,
    ) -> Result<(), CliError> {
        let mut outputs = self.files.clone();
        outputs.push(MANIFEST_FILE.to_string());
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash,
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            tolerances,
            outputs,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}

/// Hash of labelled byte strings, each length-prefixed.
pub fn config_hash(parts: &[(&str, &[u8])]) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in parts {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
