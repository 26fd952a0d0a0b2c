//! Per-run provenance manifests.
//!
//! Every command-line invocation records what it did as a small JSON
//! file next to its outputs: the subcommand, the configuration digest,
//! the seed, input and output paths, wall-clock duration, and the
//! crate version. Reruns with the same inputs and seed reproduce the
//! same outputs; the manifest is the audit trail that says which
//! inputs those were.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Record of one pipeline command execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name (`synth`, `train`, `infer`, `fuse`, `eval`).
    pub command: String,
    /// Digest of the effective configuration (after CLI overrides).
    pub config_digest: String,
    /// Seed the run used.
    pub seed: u64,
    /// Input paths consumed.
    pub inputs: Vec<String>,
    /// Output paths produced.
    pub outputs: Vec<String>,
    /// Wall-clock duration in milliseconds.
    pub duration_ms: u64,
    /// Seconds since the Unix epoch at completion time.
    pub completed_unix: u64,
    /// Crate version that produced the outputs.
    pub version: String,
}

impl RunManifest {
    /// Assemble a manifest stamped with the current time and crate
    /// version.
    pub fn new(
        command: &str,
        config_digest: &str,
        seed: u64,
        inputs: Vec<String>,
        outputs: Vec<String>,
        duration_ms: u64,
    ) -> Self {
        let completed_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            config_digest: config_digest.to_string(),
            seed,
            inputs,
            outputs,
            duration_ms,
            completed_unix,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Write as pretty-printed JSON.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a manifest back.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: bad manifest: {e}", path.display())))
    }
}
