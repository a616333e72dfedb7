use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Embedded in every artifact written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_text: &str, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash(config_text),
            seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    /// One-line form for text formats (CSV comments, PGM headers).
    pub fn line(&self) -> String {
        format!(
            "masscad {} config={} seed={}",
            self.tool_version, self.config_hash, self.seed
        )
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}
