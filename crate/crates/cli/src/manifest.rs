use std::fs;
use std::path::{Path, PathBuf};

use multiclip::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Record of one command's outputs. Contains no timestamps or absolute paths
/// so identical runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config_fingerprint: String,
    pub artifacts: Vec<Artifact>,
}

/// Collects the files a command writes below its output directory.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        self.record(rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Registers a file that was written by other means.
    pub fn record(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    /// Registers every file below `rel` (a directory) in sorted order.
    pub fn record_tree(&mut self, rel: &str) -> Result<(), CliError> {
        let mut files = Vec::new();
        collect(&self.root, &self.path(rel), &mut files)?;
        files.sort();
        for f in files {
            self.record(&f);
        }
        Ok(())
    }

    pub fn finish(mut self, command: &str, seed: Option<u64>, config_fingerprint: String) -> Result<Manifest, CliError> {
        self.written.sort();
        let mut artifacts = Vec::with_capacity(self.written.len());
        for rel in &self.written {
            let bytes = fs::read(self.path(rel))?;
            artifacts.push(Artifact {
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            seed,
            config_fingerprint,
            artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("below root");
            let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}
