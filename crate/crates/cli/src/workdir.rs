//! Output layout under the working directory and the provenance record.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const PROVENANCE_FILE: &str = "run.json";

#[derive(Clone, Debug)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn tiles(&self) -> PathBuf {
        self.root.join("tiles")
    }

    pub fn tile_file(&self, slide_id: &str) -> PathBuf {
        self.tiles().join(format!("{slide_id}.tiles.jsonl"))
    }

    pub fn rankings(&self) -> PathBuf {
        self.root.join("rankings")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn diagnoses(&self) -> PathBuf {
        self.results().join("diagnoses.jsonl")
    }

    pub fn ensure(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }
}

/// Written to `run.json` by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config: RunConfig,
    pub manifest_sha256: Option<String>,
    pub model_version: Option<String>,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize") + "\n";
    write_text(path, &text)
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| serde_json::to_string(v).expect("records serialize") + "\n")
        .collect()
}

pub fn record_provenance(
    cfg: &RunConfig,
    command: &str,
    model_version: Option<String>,
) -> Result<Provenance, CliError> {
    let manifest_sha256 = if cfg.manifest.exists() {
        Some(sha256_file(&cfg.manifest)?)
    } else {
        None
    };
    let p = Provenance {
        command: command.into(),
        config: cfg.clone(),
        manifest_sha256,
        model_version,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&cfg.workdir.join(PROVENANCE_FILE), &p)?;
    Ok(p)
}
