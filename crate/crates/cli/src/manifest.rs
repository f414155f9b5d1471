//! One `manifest.json` per artifact directory: what ran, with which
//! configuration, and the SHA-256 of every file read and written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::Failure;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub rng_seed: u64,
    /// Input path → hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest) → hash.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

pub fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: impl Serialize, seed: u64, dir: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config).map_err(|e| Failure::runtime(e.to_string()))?,
            seed,
            dir: dir.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    /// Replaces the configuration snapshot once inputs have refined it.
    pub fn set_config(&mut self, config: impl Serialize) -> Result<(), Failure> {
        self.config = serde_json::to_value(config).map_err(|e| Failure::runtime(e.to_string()))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Checks `path` against the manifest next to it and records its hash.
    /// `producer` names the command that writes it.
    pub fn input(&mut self, path: &Path, producer: &str) -> Result<(), Failure> {
        let hash = verify(path, producer)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Path of an output file inside the artifact directory.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    pub fn finish(self) -> Result<RunManifest, Failure> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), file_hash(&self.dir.join(name))?);
        }
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            rng_seed: self.seed,
            inputs: self.inputs,
            outputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        Ok(m)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, Failure> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Hash of `path` if it exists and matches what its producer recorded.
pub fn verify(path: &Path, producer: &str) -> Result<String, Failure> {
    let rerun = format!("run `misfitlab {producer}` first");
    if !path.is_file() {
        return Err(Failure::data(format!("missing upstream artifact `{}`; {rerun}", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let manifest = read_manifest(dir).map_err(|_| {
        Failure::data(format!("`{}` has no manifest next to it; {rerun}", path.display()))
    })?;
    let hash = file_hash(path)?;
    match manifest.outputs.get(&name) {
        Some(h) if *h == hash => Ok(hash),
        Some(_) => Err(Failure::data(format!(
            "stale upstream artifact `{}`: it changed after `misfitlab {}` wrote it; rerun `misfitlab {producer}`",
            path.display(),
            manifest.command
        ))),
        None => Err(Failure::data(format!("`{}` is not listed in its manifest; {rerun}", path.display()))),
    }
}
