//! Run manifests: the resolved configuration, input hashes, and outcome
//! values of every command, written as flat `key = value` text.
//!
//! Manifests contain no timestamps or absolute paths, so a rerun with the
//! same seed and inputs produces a byte-identical manifest.

use std::fmt::Display;
use std::io::Read;
use std::path::Path;

use karyo::Result;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Ordered `key = value` manifest.
#[derive(Debug, Clone)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    /// Starts a manifest with the command name and the resolved config.
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut entries = vec![("command".to_string(), command.to_string())];
        for (k, v) in config.entries() {
            entries.push((format!("config.{k}"), v));
        }
        for (k, v) in &config.overrides {
            entries.push((format!("override.{k}"), v.clone()));
        }
        Manifest { entries }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Records the SHA-256 of an input file under `input.<label>`.
    pub fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let hash = sha256_hex(path)?;
        self.push(&format!("input.{label}"), hash);
        Ok(())
    }

    /// Records the SHA-256 of an output file under `output.<label>`.
    pub fn output_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let hash = sha256_hex(path)?;
        self.push(&format!("output.{label}"), hash);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            text.push_str(k);
            text.push_str(" = ");
            text.push_str(v);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_hex(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn manifest_is_deterministic_text() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::defaults(Profile::Desk);
        let input = dir.path().join("input.bin");
        std::fs::write(&input, b"fixed bytes").unwrap();

        let write_one = |path: &Path| {
            let mut m = Manifest::new("synth", &config);
            m.input_file("data", &input).unwrap();
            m.push("regions", 6);
            m.write(path).unwrap();
        };
        let (p1, p2) = (dir.path().join("m1.txt"), dir.path().join("m2.txt"));
        write_one(&p1);
        write_one(&p2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("command = synth\n"));
        assert!(text.contains("config.image_px = 512\n"));
        assert!(text.contains("regions = 6\n"));
    }

    #[test]
    fn sha256_matches_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc.txt");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_hex(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
