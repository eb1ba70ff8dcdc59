//! Run manifests: one JSON record per CLI run, written next to the
//! primary output. The manifest is deliberately byte-reproducible —
//! rerunning a command with the same inputs and seed writes the same
//! bytes — so wall time is logged to stderr instead of recorded here
//! (the field stays in the schema as an explicit null).

use std::path::{Path, PathBuf};

use dpq_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Canonical key=value snapshot of the fully-resolved config.
    pub config: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Intentionally unrecorded (stderr carries the measurement) so that
    /// reruns are byte-identical.
    pub wall_time_ms: Option<u64>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: hash_file(path)?,
    })
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_ms: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(record(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(record(path)?);
        Ok(())
    }

    /// Serialize and write; returns the manifest path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(self)
            .expect("manifest serialization is infallible");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(path.to_path_buf())
    }
}

/// Manifest path for a run: `<out>.manifest` next to the primary output,
/// or `dpq-<command>.manifest` in the working directory for commands that
/// printed to stdout.
pub fn manifest_path(out: Option<&Path>, command_label: &str) -> PathBuf {
    match out {
        Some(out) => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest");
            out.with_file_name(name)
        }
        None => PathBuf::from(format!(
            "dpq-{}.manifest",
            command_label.replace(' ', "-")
        )),
    }
}
