//! Collects a command's output files in memory and writes them in one go.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const CHECKSUM_FILE: &str = "checksums.txt";

#[derive(Debug, Default)]
pub struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `n/a` for missing or NaN values, shortest round-trip text otherwise.
pub fn fmt_metric(x: Option<f64>) -> String {
    match x {
        Some(v) if !v.is_nan() => v.to_string(),
        _ => "n/a".into(),
    }
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::io(name, e.into_error()))?;
        self.add(name, bytes);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    /// Writes every file plus a sha256 listing. Refuses a non-empty
    /// directory unless `force`.
    pub fn write(mut self, dir: &Path, force: bool) -> CliResult<Vec<PathBuf>> {
        if dir.exists() {
            let occupied = fs::read_dir(dir)
                .map_err(|e| CliError::io(dir, e))?
                .next()
                .is_some();
            if occupied && !force {
                return Err(CliError::Exists(dir.display().to_string()));
            }
        }
        let listing: String = self
            .files
            .iter()
            .map(|(name, bytes)| format!("{}  {name}\n", sha256_hex(bytes)))
            .collect();
        self.files
            .insert(CHECKSUM_FILE.into(), listing.into_bytes());
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_occupied_dir_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new();
        out.add("a.txt", b"1".to_vec());
        out.write(dir.path(), false).unwrap();
        let mut again = Outputs::new();
        again.add("a.txt", b"2".to_vec());
        assert!(matches!(
            again.write(dir.path(), false),
            Err(CliError::Exists(_))
        ));
        let mut forced = Outputs::new();
        forced.add("a.txt", b"2".to_vec());
        forced.write(dir.path(), true).unwrap();
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"2");
        let sums = fs::read_to_string(dir.path().join(CHECKSUM_FILE)).unwrap();
        assert!(sums.contains(&sha256_hex(b"2")));
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(fmt_metric(None), "n/a");
        assert_eq!(fmt_metric(Some(f64::NAN)), "n/a");
        assert_eq!(fmt_metric(Some(0.25)), "0.25");
    }
}
