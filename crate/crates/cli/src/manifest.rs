//! The JSON record every command leaves behind.

use std::collections::BTreeMap;
use std::path::Path;

use dcvnet::decoder::PhaseTimings;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{io_error, to_json, write_file, CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct Padding {
    pub original: [usize; 2],
    pub padded: [usize; 2],
    pub mode: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: Option<u64>,
    pub precision: String,
    pub threads: usize,
    pub config: serde_json::Value,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_ms: Option<PhaseTimings>,
    pub padding: Option<Padding>,
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, precision: &str) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            precision: precision.to_string(),
            threads: rayon::current_num_threads(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings_ms: None,
            padding: None,
            status: "running".into(),
            error: None,
        }
    }

    /// Reads `path` and records its digest; returns the bytes.
    pub fn read_input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn finish(&mut self, result: &CliResult<()>) {
        match result {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = match e {
                    CliError::Input(_) => "input-error".into(),
                    CliError::Numerical(_) => "numerical-failure".into(),
                };
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_file(path, to_json(self).as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
