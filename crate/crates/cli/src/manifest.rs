use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

impl FileDigest {
    pub fn of(path: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            path: path.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        }
    }
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; `nmfre rerun` replays them.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    pub exit_code: u8,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Collects inputs and outputs of one run.
pub struct Run {
    pub out_dir: PathBuf,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    started: Instant,
    started_unix: u64,
}

impl Run {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        })
    }

    /// Reads an input file and records the digest of the exact bytes read.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileDigest::of(path.display().to_string(), &bytes));
        Ok(bytes)
    }

    pub fn record_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.push(FileDigest::of(name, bytes));
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileDigest::of(name, bytes));
        Ok(path)
    }

    pub fn finish(
        self,
        command: &str,
        argv: Vec<String>,
        config: serde_json::Value,
        seed: u64,
        exit_code: u8,
    ) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            argv,
            config,
            inputs: self.inputs,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix_secs: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            exit_code,
            outputs: self.outputs,
        };
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
