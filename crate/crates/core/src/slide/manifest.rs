//! Line-delimited dataset manifests and tile annotation files.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"s001","path":"slides/s001.png","label":"HG","split":"train","annotated":true,"annotations":"annotations/s001.jsonl"}
//! ```
//!
//! `label` may be `null` or `""`. Relative paths resolve against the
//! manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use super::Split;
use crate::label::ClassLabel;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate slide id `{0}`")]
    DuplicateId(String),
}

fn empty_label_as_none<'de, D>(d: D) -> Result<Option<ClassLabel>, D::Error>
where
    D: Deserializer<'de>,
{
    let raw: Option<String> = Option::deserialize(d)?;
    match raw.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, deserialize_with = "empty_label_as_none")]
    pub label: Option<ClassLabel>,
    pub split: Split,
    #[serde(default)]
    pub annotated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
}

/// A tile-level ground-truth label, keyed by the tile's level-0 origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileAnnotation {
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|e| ManifestError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ManifestError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

impl DatasetManifest {
    /// Loads a manifest, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries: Vec<ManifestEntry> = read_lines(path)?;
        let mut seen = HashSet::new();
        for e in &mut entries {
            if !seen.insert(e.id.clone()) {
                return Err(ManifestError::DuplicateId(e.id.clone()));
            }
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if let Some(a) = e.annotations.as_mut() {
                if a.is_relative() {
                    *a = base.join(&*a);
                }
            }
        }
        Ok(Self { entries })
    }

    /// Serializes entries as written, one per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

impl TileAnnotation {
    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<TileAnnotation>, ManifestError> {
        read_lines(path.as_ref())
    }

    pub fn to_jsonl(items: &[TileAnnotation]) -> String {
        items
            .iter()
            .map(|a| serde_json::to_string(a).expect("annotations serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_resolves_paths_and_empty_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("manifest.jsonl");
        fs::write(
            &m,
            concat!(
                r#"{"id":"a","path":"slides/a.png","label":"HG","split":"train","annotated":true,"annotations":"ann/a.jsonl"}"#,
                "\n\n",
                r#"{"id":"b","path":"/abs/b.png","label":"","split":"test"}"#,
                "\n",
            ),
        )
        .unwrap();
        let man = DatasetManifest::load(&m).unwrap();
        assert_eq!(man.entries.len(), 2);
        assert_eq!(man.entries[0].path, tmp.path().join("slides/a.png"));
        assert_eq!(man.entries[0].annotations, Some(tmp.path().join("ann/a.jsonl")));
        assert_eq!(man.entries[0].label, Some(ClassLabel::HighGrade));
        assert_eq!(man.entries[1].label, None);
        assert!(!man.entries[1].annotated);
        assert_eq!(man.entries[1].path, PathBuf::from("/abs/b.png"));
    }

    #[test]
    fn duplicate_ids_and_bad_lines_fail() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.jsonl");
        let line = r#"{"id":"a","path":"a.png","label":null,"split":"val"}"#;
        fs::write(&m, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(DatasetManifest::load(&m), Err(ManifestError::DuplicateId(_))));
        fs::write(&m, "{\"id\":\"a\",\"path\":\"a.png\",\"label\":\"XX\",\"split\":\"val\"}\n").unwrap();
        assert!(matches!(DatasetManifest::load(&m), Err(ManifestError::Parse { line: 1, .. })));
    }
}
