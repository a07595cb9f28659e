use std::path::{Path, PathBuf};

use colomil_core::mil::MilError;
use colomil_core::scorer::ScorerError;
use colomil_core::slide::{ManifestError, SlideError};
use colomil_core::synth::SynthError;
use colomil_core::tiler::TileError;
use colomil_core::tissue::MaskIoError;
use colomil_core::eval::MetricError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Mask(#[from] MaskIoError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("server error: {0}")]
    Serve(String),
}

/// What a failed command prints on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "invalid_config",
            Self::MissingInput(_) => "missing_input",
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Manifest(_) => "manifest",
            Self::Slide(SlideError::UnsupportedFormat(_)) => "unsupported_format",
            Self::Slide(SlideError::CorruptFile { .. }) => "corrupt_slide",
            Self::Slide(_) => "slide",
            Self::Mask(_) => "mask",
            Self::Tile(_) => "tile",
            Self::Scorer(ScorerError::CorruptCheckpoint(_)) => "corrupt_checkpoint",
            Self::Scorer(_) => "scorer",
            Self::Mil(_) => "mil",
            Self::Metric(_) => "metric",
            Self::Synth(_) => "synth",
            Self::Serve(_) => "serve",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            code: self.code(),
            message: self.to_string(),
        }
    }
}
