//! Persistence conventions shared by all artifacts: content-hashed
//! manifests, JSON helpers, and the commented-CSV format used for metric
//! and training tables.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    let display = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(&display, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_string(&h.finalize()))
}

fn hex_string(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Artifact manifest: hashes of every referenced file plus creation
/// metadata. Loading verifies all hashes or fails as a whole.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub created_unix_ms: u64,
    /// Relative path -> sha256 hex.
    pub files: BTreeMap<String, String>,
    /// Kind-specific records (e.g. per-sample dataset rows).
    #[serde(default)]
    pub payload: serde_json::Value,
}

impl Manifest {
    pub fn new(kind: &str, seed: u64, config_hash: &str) -> Self {
        let created_unix_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind: kind.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            created_unix_ms,
            files: BTreeMap::new(),
            payload: serde_json::Value::Null,
        }
    }

    /// Hashes `rel_path` under `dir` and records it.
    pub fn add_file(&mut self, dir: &Path, rel_path: &str) -> Result<()> {
        let hash = sha256_hex_file(&dir.join(rel_path))?;
        self.files.insert(rel_path.to_string(), hash);
        Ok(())
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    write_json_pretty(&dir.join(MANIFEST_FILE), manifest)
}

/// Loads and fully verifies a manifest: schema version, referenced file
/// existence, and content hashes. Never partially succeeds.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingDependency(format!("manifest {}", path.display())));
    }
    let manifest: Manifest = read_json(&path)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::CorruptArtifact(format!(
            "{}: schema version {} (expected {MANIFEST_SCHEMA_VERSION})",
            path.display(),
            manifest.schema_version
        )));
    }
    for (rel, expected) in &manifest.files {
        let fpath = dir.join(rel);
        if !fpath.exists() {
            return Err(Error::MissingDependency(format!(
                "file {} referenced by {}",
                fpath.display(),
                path.display()
            )));
        }
        let actual = sha256_hex_file(&fpath)?;
        if &actual != expected {
            return Err(Error::CorruptArtifact(format!(
                "corrupt artifact: {} hash {} != recorded {}",
                fpath.display(),
                actual,
                expected
            )));
        }
    }
    Ok(manifest)
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let display = path.display().to_string();
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: display.clone(), source: e })?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(&display, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: display, source: e })
}

/// CSV table with `# key=value` provenance comment lines before the
/// header. Fields never contain commas or newlines by construction.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    pub comments: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable {
            comments: BTreeMap::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, key: &str, value: impl std::fmt::Display) {
        self.comments.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut out = String::new();
        for (k, v) in &self.comments {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(&display, e))
    }

    pub fn read(path: &Path) -> Result<CsvTable> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let mut table = CsvTable::default();
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.peek() {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    table.comments.insert(k.trim().to_string(), v.trim().to_string());
                }
                lines.next();
            } else {
                break;
            }
        }
        match lines.next() {
            Some(h) => table.header = h.split(',').map(|s| s.to_string()).collect(),
            None => {
                return Err(Error::CorruptArtifact(format!("{display}: empty csv")));
            }
        }
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
            if row.len() != table.header.len() {
                return Err(Error::CorruptArtifact(format!(
                    "{display}: row width {} != header width {}",
                    row.len(),
                    table.header.len()
                )));
            }
            table.rows.push(row);
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"hello").unwrap();
        let mut m = Manifest::new("test", 7, "cfg123");
        m.add_file(dir.path(), "a.bin").unwrap();
        m.payload = serde_json::json!({"rows": [1, 2, 3]});
        write_manifest(dir.path(), &m).unwrap();

        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.files, m.files);
        assert_eq!(back.payload, m.payload);
    }

    #[test]
    fn tampered_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"hello").unwrap();
        let mut m = Manifest::new("test", 7, "cfg123");
        m.add_file(dir.path(), "a.bin").unwrap();
        write_manifest(dir.path(), &m).unwrap();
        std::fs::write(dir.path().join("a.bin"), b"hellO").unwrap();
        match load_manifest(dir.path()) {
            Err(Error::CorruptArtifact(msg)) => assert!(msg.contains("a.bin")),
            other => panic!("expected corrupt artifact, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"hello").unwrap();
        let mut m = Manifest::new("test", 7, "cfg123");
        m.add_file(dir.path(), "a.bin").unwrap();
        write_manifest(dir.path(), &m).unwrap();
        std::fs::remove_file(dir.path().join("a.bin")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::MissingDependency(_))));
    }

    #[test]
    fn csv_roundtrip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CsvTable::new(&["a", "b"]);
        t.comment("config_hash", "abc");
        t.comment("seed", 7);
        t.push(vec!["1".into(), "x".into()]);
        t.push(vec!["2".into(), "y".into()]);
        let path = dir.path().join("t.csv");
        t.write(&path).unwrap();
        let back = CsvTable::read(&path).unwrap();
        assert_eq!(back.comments.get("seed").unwrap(), "7");
        assert_eq!(back.header, vec!["a", "b"]);
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.column("b"), Some(1));
    }
}
