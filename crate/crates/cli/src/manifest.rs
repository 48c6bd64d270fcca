//! Run manifests: what ran, on which bytes, with which weights.
//!
//! Manifests carry no timestamps or absolute output paths, so two identical
//! runs write identical manifests.

use std::fs;
use std::path::Path;

use nriqa_core::quality::defaults;
use nriqa_core::{MeasureKind, ModelKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub weights: Vec<FileHash>,
    /// Relative to the output directory.
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config).expect("flags serialize"),
            seed,
            inputs: Vec::new(),
            weights: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path)?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Records the embedded weight and calibration files of `model`.
    pub fn model_weights(&mut self, model: ModelKind) {
        let prefix = format!("{}.", model.id());
        self.embedded(|name| name.starts_with(&prefix));
    }

    pub fn measure_weights(&mut self, measure: MeasureKind) {
        if measure.needs_extractor() {
            self.embedded(|name| name == "extractor.iqaw");
        }
    }

    fn embedded(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, bytes) in defaults::files() {
            if keep(name) && !self.weights.iter().any(|w| w.path == name) {
                self.weights.push(FileHash {
                    path: name.to_string(),
                    sha256: sha256_hex(bytes),
                });
            }
        }
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn file_name(&self) -> String {
        format!("{}.run.json", self.command)
    }

    /// Writes `<command>.run.json` into `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(dir.join(self.file_name()), text + "\n")?;
        Ok(())
    }
}
