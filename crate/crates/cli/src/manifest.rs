use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Build identifier: crate version plus the commit the binary was built from.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("CABERNET_GIT_REV"))
}

/// Provenance of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    /// Full configuration the command ran with.
    pub config: serde_json::Value,
    pub root_seed: u64,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
    pub build_id: String,
}

impl RunManifest {
    /// Content id over everything that determines the results.
    pub fn id(&self) -> String {
        let key = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "seeds": self.seeds,
            "inputs": self.inputs,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))[..16].to_string()
    }
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &str, config: serde_json::Value, config_hash: String, root_seed: u64) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                config_hash,
                config,
                root_seed,
                seeds: Vec::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_at: chrono::Utc::now().to_rfc3339(),
                wall_clock_seconds: 0.0,
                build_id: build_id(),
            },
            start: Instant::now(),
        }
    }

    pub fn seeds(&mut self, seeds: impl IntoIterator<Item = u64>) {
        self.manifest.seeds.extend(seeds);
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn id(&self) -> String {
        self.manifest.id()
    }

    pub fn finish(mut self, out_dir: &Path) -> anyhow::Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        std::fs::create_dir_all(out_dir)?;
        let mut json = serde_json::to_vec_pretty(&serde_json::json!({
            "id": self.manifest.id(),
            "manifest": &self.manifest,
        }))?;
        json.push(b'\n');
        std::fs::write(out_dir.join(MANIFEST_FILE), json)?;
        Ok(self.manifest)
    }
}
