//! Run manifest: the index a pipeline invocation leaves behind.
//!
//! Written before any stage executes so the config hash is on disk first;
//! rewritten as runs complete. On a failed run the manifest keeps whatever
//! artifacts made it to disk, so partial runs stay inspectable.

use std::fs;
use std::path::Path;

use dgd_core::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Derived from the config hash and seed set; stable across reruns.
    pub run_id: String,
    /// Content hash of the experiment config, recorded before execution.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Checkpoint files, relative to the manifest's directory.
    pub checkpoints: Vec<String>,
    /// Stage report files, relative to the manifest's directory.
    pub reports: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(config_hash: &str, seeds: Vec<u64>) -> Self {
        let short = &config_hash[..12.min(config_hash.len())];
        let run_id = match (seeds.first(), seeds.len()) {
            (Some(first), 1) => format!("{short}-s{first}"),
            (Some(first), n) => format!("{short}-s{first}-n{n}"),
            (None, _) => short.to_string(),
        };
        Self {
            run_id,
            config_hash: config_hash.to_string(),
            seeds,
            checkpoints: Vec::new(),
            reports: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Records artifacts found on disk under `run_dir` (relative paths get
    /// `prefix` prepended). Used both after successful runs and to pick up
    /// the pieces of a failed one.
    pub fn record_run_dir(&mut self, run_dir: &Path, prefix: &str) {
        for (sub, bucket) in
            [("checkpoints", Bucket::Checkpoints), ("reports", Bucket::Reports)]
        {
            let mut names = match list_json_files(&run_dir.join(sub)) {
                Ok(names) => names,
                Err(_) => continue,
            };
            names.sort();
            for name in names {
                let rel = format!("{prefix}{sub}/{name}");
                let list = match bucket {
                    Bucket::Checkpoints => &mut self.checkpoints,
                    Bucket::Reports => &mut self.reports,
                };
                if !list.contains(&rel) {
                    list.push(rel);
                }
            }
        }
    }
}

enum Bucket {
    Checkpoints,
    Reports,
}

fn list_json_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".json") {
            names.push(name);
        }
    }
    Ok(names)
}
