//! Run manifests: the resolved configuration plus SHA-256 hashes of every
//! input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mdlab::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: &str = "mdlab-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes every file under `out` (except the manifest itself), keyed by
    /// its path relative to `out`.
    pub fn collect_outputs(&mut self, out: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(out, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(out).unwrap_or(&f);
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            self.outputs.insert(key, sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(out.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, files)?;
        } else {
            files.push(p);
        }
    }
    Ok(())
}
