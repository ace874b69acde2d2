//! Run manifest: which stages ran, under which config digest, producing
//! which files. Lets a driver skip stages whose outputs are already current.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_digest: String,
    pub status: String,
    pub completed_unix: u64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(out_dir: &Path) -> Self {
        let path = out_dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            },
        }
    }

    /// A stage is current when it completed under the same digest and every
    /// listed output still exists.
    pub fn stage_is_current(&self, stage: &str, digest: &str, out_dir: &Path) -> bool {
        match self.stages.get(stage) {
            Some(record) => {
                record.status == "ok"
                    && record.config_digest == digest
                    && record
                        .outputs
                        .iter()
                        .all(|rel| out_dir.join(rel).exists())
            }
            None => false,
        }
    }

    pub fn record_stage(&mut self, stage: &str, digest: &str, outputs: Vec<PathBuf>) {
        let outputs = outputs
            .into_iter()
            .map(|p| {
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.to_string_lossy().into_owned())
            })
            .collect();
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                config_digest: digest.to_string(),
                status: "ok".into(),
                completed_unix: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                outputs,
            },
        );
    }

    /// Write-temp-then-rename so a crash never leaves a torn manifest.
    pub fn store(&self, out_dir: &Path) -> Result<()> {
        self.store_with_version(out_dir, env!("CARGO_PKG_VERSION"))
    }

    fn store_with_version(&self, out_dir: &Path, version: &str) -> Result<()> {
        let mut manifest = self.clone();
        manifest.tool_version = version.to_string();
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, json)?;
        fs::rename(&tmp, out_dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}
