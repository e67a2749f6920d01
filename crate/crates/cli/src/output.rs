//! Deterministic text artifacts.
//!
//! Every run writes plain CSV files plus a `manifest.txt` naming the
//! artifacts and the hash of the resolved configuration. Numbers are
//! formatted with Rust's default float formatter, which emits the shortest
//! string that round-trips, so re-running the same configuration produces
//! byte-identical files. Timing and other nondeterministic information goes
//! to stdout only, never into the artifacts.

use anyhow::{Context, Result};
use std::fs;
use std::path::{Path, PathBuf};

/// A CSV file being built up row by row.
pub struct Csv {
    path: PathBuf,
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(dir: &Path, name: &str, header: &[&str]) -> Csv {
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        Csv {
            path: dir.join(name),
            buf,
            columns: header.len(),
        }
    }

    /// Appends a row of already formatted fields.
    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "row width mismatch in {:?}", self.path);
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    /// Appends a row of floats using the default (round-trip) formatting.
    pub fn row_f64(&mut self, fields: &[f64]) {
        let formatted: Vec<String> = fields.iter().map(|x| x.to_string()).collect();
        self.row(&formatted);
    }

    /// Writes the file and returns its file name for the manifest.
    pub fn finish(self) -> Result<String> {
        fs::write(&self.path, self.buf.as_bytes())
            .with_context(|| format!("writing {:?}", self.path))?;
        Ok(self
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default())
    }
}

/// Collects artifact names and writes `manifest.txt` at the end of a run.
pub struct Manifest {
    dir: PathBuf,
    config_hash: String,
    entries: Vec<String>,
}

impl Manifest {
    pub fn new(dir: &Path, config_hash: &str) -> Manifest {
        Manifest {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, name: String) {
        self.entries.push(name);
    }

    pub fn write(mut self) -> Result<()> {
        self.entries.sort();
        let mut body = format!("config_sha256 = {}\n", self.config_hash);
        for e in &self.entries {
            body.push_str("artifact = ");
            body.push_str(e);
            body.push('\n');
        }
        let path = self.dir.join("manifest.txt");
        fs::write(&path, body.as_bytes()).with_context(|| format!("writing {path:?}"))
    }
}

/// Creates the output directory (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {dir:?}"))
}

/// Writes the canonical configuration echo alongside the artifacts.
pub fn write_resolved_config(dir: &Path, canonical: &str, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join("config.resolved");
    fs::write(&path, canonical.as_bytes()).with_context(|| format!("writing {path:?}"))?;
    manifest.record("config.resolved".to_string());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_are_round_trip_formatted() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = Csv::new(dir.path(), "x.csv", &["a", "b"]);
        csv.row_f64(&[0.1, 1.0 / 3.0]);
        let name = csv.finish().unwrap();
        assert_eq!(name, "x.csv");
        let text = fs::read_to_string(dir.path().join("x.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("a,b"));
        let row = lines.next().unwrap();
        let vals: Vec<f64> = row.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(vals[0], 0.1);
        assert_eq!(vals[1], 1.0 / 3.0);
    }

    #[test]
    fn manifest_lists_artifacts_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(dir.path(), "abc123");
        m.record("z.csv".into());
        m.record("a.csv".into());
        m.write().unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "config_sha256 = abc123");
        assert_eq!(lines[1], "artifact = a.csv");
        assert_eq!(lines[2], "artifact = z.csv");
    }
}
