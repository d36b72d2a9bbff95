use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// SHA-256 of a file, or of the sorted `(relative path, file hash)` list of
/// a directory. Run manifests are left out so a rerun hashes the same.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let digest = hash_path(&path.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if entry.file_name() != RUN_MANIFEST {
            out.push(path.strip_prefix(root).expect("walked from root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: hash_path(path)?,
        })
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Collects what a command read and wrote, then writes the manifest.
pub(crate) struct Recorder {
    command: &'static str,
    started: Instant,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &'static str, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Recorder {
            command,
            started: Instant::now(),
            config: serde_json::to_value(config)?,
            seeds,
            inputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Hashes inputs and `outputs` and writes the manifest into `dir`.
    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
