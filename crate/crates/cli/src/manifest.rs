//! Reproducibility manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{create, open};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: serde_json::Value,
    pub config: Option<serde_json::Value>,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: serde_json::to_value(args)?,
            config: None,
            inputs: BTreeMap::new(),
            seed: None,
            outputs: Vec::new(),
        })
    }

    pub fn config(&mut self, cfg: &impl Serialize) -> Result<()> {
        self.config = Some(serde_json::to_value(cfg)?);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let mut f = create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        std::io::Write::write_all(&mut f, b"\n")?;
        Ok(path.to_path_buf())
    }
}

/// `out.ext` becomes `out.ext.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}
