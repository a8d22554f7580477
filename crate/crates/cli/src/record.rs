//! Reproducibility record written next to every command's outputs.

use std::fs;
use std::path::Path;

use facseg::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    /// sha256 of the canonical JSON of `config`.
    pub config_sha256: String,
    pub config: &'a serde_json::Value,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json maps are ordered, so this serialization is canonical.
    let bytes = serde_json::to_vec(config).expect("json values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_record(dir: &Path, command: &str, seed: u64, config: &serde_json::Value) -> Result<()> {
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256: config_hash(config),
        config,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::Io { path, source: e })
}
