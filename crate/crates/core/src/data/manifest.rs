//! JSON-lines dataset manifests.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};
use crate::losses::Rect;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub patient: String,
    pub slice: usize,
    pub domain: String,
    pub role: Role,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Rect>,
    /// Keys this version does not know about, kept for round trips.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Ordered records plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.role == role)
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    detail: format!("duplicate id {}", r.id),
                });
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.records {
            for rel in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(Error::MissingFile(path));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses JSON lines; blank lines are skipped, line numbers are 1-based.
    pub fn from_jsonl(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                detail: e.to_string(),
            })?;
            records.push(record);
        }
        let m = Self {
            root: root.to_path_buf(),
            records,
        };
        m.check_unique_ids()?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m = Manifest::from_jsonl(&text, &root)?;
    m.check_files()?;
    Ok(m)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.check_unique_ids()?;
    std::fs::write(path, manifest.to_jsonl()?).map_err(|e| Error::io(path, e))
}
