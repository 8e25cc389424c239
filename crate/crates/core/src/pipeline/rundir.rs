// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

use super::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// A run directory. Every read and write goes through a relative path that
/// may not leave the root.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        assert!(
            p.components().all(|c| matches!(c, Component::Normal(_))),
            "run-relative path `{rel}` escapes the run directory"
        );
        self.root.join(p)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// The path of `rel`, or a prerequisite error naming `hint`.
    pub fn require(&self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(LabError::Prerequisite { path: p, hint: hint.into() })
        }
    }

    pub fn write(&self, rel: &str, body: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, body)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, hint: &str) -> Result<T> {
        let p = self.require(rel, hint)?;
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }

    pub fn read_string(&self, rel: &str, hint: &str) -> Result<String> {
        Ok(fs::read_to_string(self.require(rel, hint)?)?)
    }

    /// Every regular file under the root except the manifest, as sorted
    /// `/`-separated relative paths.
    pub fn inventory(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        if self.root.exists() {
            walk(&self.root, &self.root, &mut out)?;
        }
        out.retain(|p| p != MANIFEST);
        out.sort();
        Ok(out)
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let p = entry.path();
        if entry.file_type()?.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Provenance of a run directory. Everything except `timings` is a pure
/// function of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub config: RunConfig,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// Relative path to sha256 of every file in the run directory.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        let versions = [
            ("tablelab", env!("CARGO_PKG_VERSION").to_string()),
            ("dataset", DATASET_VERSION.to_string()),
            ("checkpoint", CHECKPOINT_VERSION.to_string()),
            ("manifest", MANIFEST_VERSION.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { config_hash: config.hash(), versions, config: config.clone(), timings: BTreeMap::new(), files: BTreeMap::new() }
    }

    pub fn load(dir: &RunDir) -> Result<Option<Self>> {
        if !dir.exists(MANIFEST) {
            return Ok(None);
        }
        Ok(Some(dir.read_json(MANIFEST, "gen")?))
    }

    /// Re-hashes the inventory and writes the manifest.
    pub fn refresh(&mut self, dir: &RunDir) -> Result<()> {
        self.files.clear();
        for rel in dir.inventory()? {
            self.files.insert(rel.clone(), sha256_file(&dir.path(&rel))?);
        }
        dir.write_json(MANIFEST, self)
    }

    /// The manifest with timings removed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self { timings: BTreeMap::new(), ..self.clone() }
    }
}
