//! The per-run manifest: everything needed to name, audit, and re-execute
//! a run. The config echo restores the exact configuration; re-running it
//! with the recorded seed reproduces the metrics file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UniregError};
use crate::harness::config::{config_from_echo, Config};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub experiment: String,
    pub seed: u64,
    /// Identifier of the deterministic generator scheme.
    pub rng_algorithm: String,
    /// The explicitly-set config keys, re-executable via `config()`.
    pub config_echo: BTreeMap<String, String>,
    /// Every applicable key with its final value, defaults included.
    pub resolved_config: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    /// Final scalar results of the run.
    pub summary: BTreeMap<String, f64>,
    /// Free-form audit notes (class splits, normalizations applied).
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    /// Rebuild the exact configuration this run executed.
    pub fn config(&self) -> Result<Config> {
        config_from_echo(&self.config_echo)
    }
}

pub fn save_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| UniregError::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| UniregError::Format(format!("bad manifest: {e}")))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(UniregError::Format(format!(
            "manifest format version {} is not supported (expected {})",
            manifest.format_version, MANIFEST_FORMAT_VERSION
        )));
    }
    Ok(manifest)
}
