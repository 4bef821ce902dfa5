//! Experiment runner for the masked-diffusion decoding lab.
//!
//! Every subcommand resolves a [`config::RunConfig`], writes its outputs into
//! one directory and finishes with a `manifest.json` holding the resolved
//! configuration and SHA-256 hashes of inputs and outputs. Passing that
//! manifest back as `--config` reproduces the run.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use mdlab::{Error, Result};

pub use commands::Command;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MDLAB_OUT";

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    /// `key=value` overrides.
    pub set: Vec<String>,
}

impl Common {
    /// `--out`, else `$MDLAB_OUT/<command>`, else `runs/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
            _ => PathBuf::from("runs").join(command),
        }
    }

    pub fn resolve(&self, command: &str) -> Result<config::RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::RunConfig::load(p, command)?,
            None => config::RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim());
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string());
        }
        Ok(cfg)
    }
}

/// Runs `cmd` and returns its output directory.
pub fn run(cmd: Command, common: &Common) -> Result<PathBuf> {
    let out = common.out_dir(cmd.name());
    let cfg = common.resolve(cmd.name())?;
    fs::create_dir_all(&out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| commands::execute(cmd, &cfg, &out))?;
    Ok(out)
}

/// The JSON error record printed on failure.
pub fn error_record(command: &str, e: &Error) -> String {
    serde_json::json!({
        "status": "error",
        "command": command,
        "kind": e.kind(),
        "message": e.to_string(),
    })
    .to_string()
}

/// Best-effort write of the error record next to the outputs.
pub fn write_error_record(out: &Path, record: &str) {
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("error.json"), format!("{record}\n"));
    }
}
