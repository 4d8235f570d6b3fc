//! Run manifests and content hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zoomnet_core::Result;

/// Written into every output directory. Holds no timestamps or host details,
/// so reruns with the same inputs produce the same file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: u64,
    /// Config files in their canonical `key = value` form.
    pub config: serde_json::Map<String, serde_json::Value>,
    /// SHA-256 of the checkpoint the run produced or consumed.
    pub checkpoint_sha256: Option<String>,
    /// Content hash of the input or output corpus.
    pub corpus_sha256: Option<String>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &[String], seed: u64) -> Self {
        Self {
            command: command.to_vec(),
            seed,
            metrics: serde_json::Value::Null,
            ..Default::default()
        }
    }

    pub fn with_config(mut self, name: &str, text: String) -> Self {
        self.config.insert(name.into(), serde_json::Value::String(text));
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walked from root").to_path_buf());
        }
    }
    Ok(())
}

/// Hash over every file below `root` except `skip`, in sorted path order.
/// Each file contributes its relative path and its contents.
pub fn sha256_tree(root: &Path, skip: &[&str]) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    let mut h = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        if skip.contains(&name.as_str()) {
            continue;
        }
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let data = std::fs::read(root.join(&rel))?;
        h.update((data.len() as u64).to_le_bytes());
        h.update(&data);
    }
    Ok(hex::encode(h.finalize()))
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
    fn tree_hash_sees_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir(d.path().join("a")).unwrap();
        std::fs::write(d.path().join("a/x"), b"1").unwrap();
        std::fs::write(d.path().join("manifest.json"), b"ignored").unwrap();
        let h1 = sha256_tree(d.path(), &["manifest.json"]).unwrap();
        std::fs::write(d.path().join("manifest.json"), b"changed").unwrap();
        assert_eq!(h1, sha256_tree(d.path(), &["manifest.json"]).unwrap());
        std::fs::write(d.path().join("a/x"), b"2").unwrap();
        assert_ne!(h1, sha256_tree(d.path(), &["manifest.json"]).unwrap());
    }
}
