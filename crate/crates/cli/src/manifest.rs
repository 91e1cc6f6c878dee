use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use dfp::model_io::archive::write_atomic;
use dfp::Result;

/// Provenance record written next to every output artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub model_fingerprint: Option<String>,
    /// sha256 of each input file, keyed by the path as given.
    pub input_digests: BTreeMap<String, String>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects inputs and finished artifacts, then writes them all at the end so
/// a failing command leaves nothing behind.
pub struct Run {
    command: String,
    flags: serde_json::Value,
    start: Instant,
    fingerprint: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    pub fn new(command: &str, flags: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
            start: Instant::now(),
            fingerprint: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn fingerprint(&mut self, fp: &str) {
        self.fingerprint = Some(fp.to_string());
    }

    pub fn output(&mut self, path: &Path, bytes: Vec<u8>) {
        self.outputs.push((path.to_path_buf(), bytes));
    }

    pub fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            flags: self.flags,
            model_fingerprint: self.fingerprint,
            input_digests: self.inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.outputs.iter().map(|(p, _)| p.display().to_string()).collect(),
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        for (path, bytes) in &self.outputs {
            write_atomic(path, bytes)?;
            write_atomic(&manifest_path(path), &json)?;
        }
        Ok(())
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
