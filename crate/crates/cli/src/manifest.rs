use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance attached to every output. Only `wall_clock_seconds` varies
/// between reruns with equal inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub tool_version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    /// `config` is serialized with sorted keys, so its digest is canonical.
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Self {
        let config = serde_json::to_value(config).expect("configs serialize to JSON");
        let config_digest = sha256_hex(config.to_string().as_bytes());
        Self {
            command: command.to_owned(),
            config,
            config_digest,
            seed,
            inputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            threads: rayon::current_num_threads(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest { role: role.to_owned(), path: path.to_path_buf(), sha256: sha256_hex(bytes) });
    }

    pub fn input(&self, role: &str) -> Option<&InputDigest> {
        self.inputs.iter().find(|d| d.role == role)
    }

    pub fn finish(mut self, started: Instant) -> Self {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self
    }
}

/// `out.csv` → `out.csv.manifest.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
