//! Run manifests: every artifact a command writes, with its content hash,
//! plus the hashes of the inputs it consumed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Hash over the config text and every input file hash, in order.
    pub inputs_hash: String,
    pub config: Option<String>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: impl Into<String>, seed: Option<u64>) -> Self {
        Manifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs_hash: String::new(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records the effective configuration (serialized text).
    pub fn set_config(&mut self, text: impl Into<String>) {
        self.config = Some(text.into());
        self.refresh_inputs_hash();
    }

    pub fn add_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.inputs.push(entry(path, path.display().to_string())?);
        self.refresh_inputs_hash();
        Ok(())
    }

    /// Records an output file, stored relative to `out_dir`.
    pub fn add_output(&mut self, out_dir: impl AsRef<Path>, rel: impl AsRef<Path>) -> Result<()> {
        let rel = rel.as_ref();
        let full = out_dir.as_ref().join(rel);
        self.outputs.push(entry(&full, rel.display().to_string())?);
        Ok(())
    }

    fn refresh_inputs_hash(&mut self) {
        let mut h = Sha256::new();
        if let Some(c) = &self.config {
            h.update(c.as_bytes());
        }
        for e in &self.inputs {
            h.update(e.sha256.as_bytes());
        }
        self.inputs_hash = hex::encode(h.finalize());
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = out_dir.as_ref().join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("manifest", e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Re-hashes every listed output under `out_dir`; returns the paths that
    /// are missing or changed.
    pub fn verify(&self, out_dir: impl AsRef<Path>) -> Vec<String> {
        let out_dir = out_dir.as_ref();
        self.outputs
            .iter()
            .filter(|e| sha256_file(out_dir.join(&e.path)).map_or(true, |h| h != e.sha256))
            .map(|e| e.path.clone())
            .collect()
    }
}

fn entry(path: &Path, name: String) -> Result<FileEntry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileEntry {
        path: name,
        sha256: sha256_bytes(&bytes),
        bytes: bytes.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn outputs_verify_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let mut m = Manifest::new("unit", Some(3));
        m.add_output(dir.path(), "a.txt").unwrap();
        let written = m.write(dir.path()).unwrap();
        assert_eq!(Manifest::load(&written).unwrap(), m);
        assert!(m.verify(dir.path()).is_empty());
        std::fs::write(dir.path().join("a.txt"), "changed").unwrap();
        assert_eq!(m.verify(dir.path()), vec!["a.txt".to_string()]);
    }

    #[test]
    fn inputs_hash_depends_on_config() {
        let mut a = Manifest::new("x", None);
        a.set_config("seed = 1");
        let mut b = Manifest::new("x", None);
        b.set_config("seed = 2");
        assert_ne!(a.inputs_hash, b.inputs_hash);
    }
}
