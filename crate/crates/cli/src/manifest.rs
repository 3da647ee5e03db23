//! Per-run manifest: resolved config, seeds, checksums of every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, so the run can be repeated.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// sha256 of each artifact, keyed by path relative to the output.
    pub checksums: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], config_path: Option<&Path>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: BTreeMap::new(),
            seeds: BTreeMap::new(),
            checksums: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    /// Records every file under `dir` except the manifest itself.
    pub fn checksum_dir(&mut self, dir: &Path) -> std::io::Result<()> {
        self.checksum_tree(dir, "", true)
    }

    /// Checksums of input components, keyed `prefix/relative/path`.
    pub fn checksum_inputs(&mut self, dir: &Path, prefix: &str) -> std::io::Result<()> {
        self.checksum_tree(dir, &format!("{prefix}/"), false)
    }

    fn checksum_tree(&mut self, dir: &Path, prefix: &str, artifacts: bool) -> std::io::Result<()> {
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let key = format!("{prefix}{rel}");
            self.checksums.insert(key.clone(), sha256_hex(&fs::read(&f)?));
            if artifacts {
                self.artifacts.push(key);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
