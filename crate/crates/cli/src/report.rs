//! Report envelope shared by every command.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use fracmf::fbm_paths::RNG_ALGORITHM;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Command, RunConfig};

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    /// Content hash of the resolved configuration in git blob form.
    pub input_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub rng: &'static str,
    pub config: RunConfig,
    pub pass: bool,
    pub result: T,
}

/// `sha256("blob <len>\0" + bytes)`, the git object id construction with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let digest = h.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

impl<T: Serialize> Report<T> {
    pub fn new(cfg: &RunConfig, workers: usize, pass: bool, result: T) -> Result<Self> {
        Ok(Self {
            tool: "fracmf",
            version: env!("CARGO_PKG_VERSION"),
            command: cfg.command,
            input_hash: blob_hash(cfg.to_toml()?.as_bytes()),
            seed: cfg.monte_carlo.seed,
            workers,
            rng: RNG_ALGORITHM,
            config: cfg.clone(),
            pass,
            result,
        })
    }

    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        match path {
            Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                std::io::stdout().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}

/// Writes a CSV table preceded by `#` comment lines.
pub fn write_csv(path: &Path, comments: &[String], header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    for c in comments {
        writeln!(buf, "# {c}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|v| format!("{v:.17e}")))?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}
