use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use incoforge_core::seed::sha256_hex;

use crate::flags::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stats: Value,
}

/// SHA-256 of a file, or of the sorted file names and contents of a directory.
pub fn path_sha256(path: &Path) -> anyhow::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        let mut buf = Vec::new();
        for e in entries.iter().filter(|e| e.is_file()) {
            buf.extend(e.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            buf.push(0);
            buf.extend(sha256_hex(&fs::read(e)?).as_bytes());
            buf.push(b'\n');
        }
        return Ok(sha256_hex(&buf));
    }
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    sibling(primary, "manifest.json")
}

pub fn run_cfg_path(primary: &Path) -> PathBuf {
    sibling(primary, "run.cfg")
}

pub fn sibling(primary: &Path, suffix: &str) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl Manifest {
    pub fn build(cfg: &RunConfig, inputs: &[&Path], outputs: &[&Path], stats: Value) -> anyhow::Result<Self> {
        let hash_all = |paths: &[&Path]| -> anyhow::Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((p.display().to_string(), path_sha256(p)?))).collect()
        };
        Ok(Self {
            command: cfg.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.public(),
            config_hash: sha256_hex(cfg.canonical().as_bytes()),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            stats,
        })
    }

    /// Writes `<primary>.manifest.json` and `<primary>.run.cfg`.
    pub fn write(&self, cfg: &RunConfig, primary: &Path) -> anyhow::Result<PathBuf> {
        let path = manifest_path(primary);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(run_cfg_path(primary), cfg.canonical())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Builds and writes the manifest for a finished stage.
pub fn record(cfg: &RunConfig, primary: &Path, inputs: &[&Path], outputs: &[&Path], stats: Value) -> anyhow::Result<Manifest> {
    let m = Manifest::build(cfg, inputs, outputs, stats)?;
    m.write(cfg, primary)?;
    Ok(m)
}
