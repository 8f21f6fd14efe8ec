//! Pipeline configuration: one TOML file drives every command.
//!
//! Flags override file values, then the resolved configuration is hashed
//! (SHA-256 of its canonical JSON form, first 12 hex digits) and that hash
//! is stamped into every output artifact, so any file on disk can be traced
//! back to the exact settings that produced it. Two configs that spell the
//! same settings differently hash identically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rtprop_core::analysis::AnalysisConfig;
use rtprop_core::ingest::IngestConfig;
use rtprop_core::simulate::SimConfig;
use rtprop_core::{Error, Result};

/// Everything a run needs: input locations, per-stage settings, the output
/// root, and the seed feeding all randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw transaction file read by `ingest`.
    pub input: Option<PathBuf>,
    /// Canonical step table read by `fit` and `analyze`.
    pub steps: Option<PathBuf>,
    /// Parent directory under which run directories are created.
    pub out_dir: PathBuf,
    /// Single seed for the whole pipeline; overrides `simulate.seed` so one
    /// knob controls every source of randomness.
    pub seed: Option<u64>,
    pub ingest: IngestConfig,
    pub simulate: SimConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            steps: None,
            out_dir: PathBuf::from("runs"),
            seed: None,
            ingest: IngestConfig::default(),
            simulate: SimConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Loads a TOML config, or the defaults when no path is given. Unknown
    /// keys anywhere in the file are rejected.
    pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }

    /// Propagates the single-seed rule. Called once after flag overrides.
    pub fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            self.simulate.seed = seed;
        }
    }

    /// First 12 hex digits of the SHA-256 of the resolved configuration.
    /// JSON field order follows struct declaration order, so the encoding
    /// is canonical.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in &digest[..6] {
            hex.push_str(&format!("{byte:02x}"));
        }
        Ok(hex)
    }
}
