//! Content hashes and run manifests, so every artifact can be traced to its
//! inputs, seed and configuration.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of the JSON encoding of a value. Struct fields serialise in
/// declaration order and maps are ordered, so equal values hash equally.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serialisable value"))
}

/// Provenance record written next to a stage's outputs. Paths are stored
/// exactly as given (keep them relative for portable manifests); no
/// timestamps are recorded so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(stage: &str, seed: u64, config_hash: String) -> Self {
        Self {
            tool: "chargechoice".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            seed,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Records the hash of an input file under `label`.
    pub fn add_input(&mut self, label: &str, path: &Path) -> io::Result<()> {
        self.inputs.insert(label.into(), hash_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, label: &str, path: &Path) -> io::Result<()> {
        self.outputs.insert(label.into(), hash_file(path)?);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable manifest");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        std::fs::write(&input, "a,b\n1,2\n").unwrap();
        let mut m = RunManifest::new("estimate", 7, hash_json(&("cfg", 1)));
        m.add_input("observations", &input).unwrap();
        let path = dir.path().join("manifest.json");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        assert_eq!(m.to_json(), RunManifest::read(&path).unwrap().to_json());
    }
}
