//! Read access to flat (PNG/TIFF) and pyramid-directory slides.
//!
//! Coordinates are always level-0 pixels. A region read at factor `f`
//! produces pixels that box-average `f`×`f` level-0 blocks; blocks clipped by
//! the slide edge average only the pixels that exist, so the full image at
//! factor `f` is `ceil(w / f)` × `ceil(h / f)`.

mod manifest;
mod pyramid;
mod resample;

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use image::{ImageError, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::ClassLabel;

pub use manifest::{DatasetManifest, ManifestEntry, ManifestError, TileAnnotation};
pub use pyramid::{write_pyramid, PyramidDescriptor, PyramidLevel, DESCRIPTOR_NAME};

pub const DEFAULT_MAX_MAGNIFICATION: f64 = 40.0;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error("unsupported slide format: {}", .0.display())]
    UnsupportedFormat(PathBuf),
    #[error("corrupt slide file {}: {reason}", path.display())]
    CorruptFile { path: PathBuf, reason: String },
    #[error("region {req:?} is outside the {width}x{height} slide")]
    OutOfBounds {
        req: RegionRequest,
        width: u32,
        height: u32,
    },
    #[error("downsample factor {0} must be a power of two >= 1")]
    InvalidFactor(u32),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to encode {}: {reason}", path.display())]
    Encode { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Identity and geometry of one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub max_magnification: f64,
    pub label: Option<ClassLabel>,
    pub split: Split,
    pub annotated: bool,
}

/// A rectangular read. `width`/`height` are output pixels at `level_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRequest {
    pub origin_x: u32,
    pub origin_y: u32,
    pub width: u32,
    pub height: u32,
    pub level_factor: u32,
}

impl RegionRequest {
    pub fn native(origin_x: u32, origin_y: u32, width: u32, height: u32) -> Self {
        Self {
            origin_x,
            origin_y,
            width,
            height,
            level_factor: 1,
        }
    }
}

enum Source {
    Flat,
    Pyramid(PyramidDescriptor),
}

/// An opened slide. Pixel data is decoded lazily on first read and shared
/// between readers afterwards.
pub struct Slide {
    record: SlideRecord,
    source: Source,
    levels: BTreeMap<u32, OnceLock<Result<Arc<RgbImage>, String>>>,
}

impl fmt::Debug for Slide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Slide").field("record", &self.record).finish()
    }
}

pub(crate) fn decode_rgb(path: &Path) -> Result<RgbImage, SlideError> {
    let reader = ImageReader::open(path)
        .map_err(|e| SlideError::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .with_guessed_format()
        .map_err(|e| SlideError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    if reader.format().is_none() {
        return Err(SlideError::UnsupportedFormat(path.to_path_buf()));
    }
    reader
        .decode()
        .map(|img| img.to_rgb8())
        .map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: ImageError) -> SlideError {
    match e {
        ImageError::Unsupported(_) => SlideError::UnsupportedFormat(path.to_path_buf()),
        ImageError::IoError(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => {
            SlideError::Io {
                path: path.to_path_buf(),
                source: io,
            }
        }
        other => SlideError::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn flat_dimensions(path: &Path) -> Result<(u32, u32), SlideError> {
    let file = std::fs::File::open(path).map_err(|e| SlideError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| SlideError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Tiff) => {}
        _ => return Err(SlideError::UnsupportedFormat(path.to_path_buf())),
    }
    reader.into_dimensions().map_err(|e| image_error(path, e))
}

/// Opens a slide from a PNG/TIFF file or a pyramid directory, reading only
/// metadata. The record gets its id from the file stem and default
/// manifest attributes.
pub fn open_slide(path: impl AsRef<Path>) -> Result<Slide, SlideError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (source, width, height) = if path.is_dir() {
        if !path.join(DESCRIPTOR_NAME).is_file() {
            return Err(SlideError::UnsupportedFormat(path.to_path_buf()));
        }
        let desc = PyramidDescriptor::read(path)?;
        let (w, h) = (desc.width, desc.height);
        (Source::Pyramid(desc), w, h)
    } else {
        let (w, h) = flat_dimensions(path)?;
        if w == 0 || h == 0 {
            return Err(SlideError::CorruptFile {
                path: path.to_path_buf(),
                reason: "empty image".into(),
            });
        }
        (Source::Flat, w, h)
    };
    let levels = match &source {
        Source::Flat => BTreeMap::from([(1, OnceLock::new())]),
        Source::Pyramid(d) => d.levels.keys().map(|&f| (f, OnceLock::new())).collect(),
    };
    Ok(Slide {
        record: SlideRecord {
            id,
            path: path.to_path_buf(),
            width,
            height,
            max_magnification: DEFAULT_MAX_MAGNIFICATION,
            label: None,
            split: Split::Train,
            annotated: false,
        },
        source,
        levels,
    })
}

impl Slide {
    /// Opens the slide referenced by a manifest entry and carries over its
    /// id, label, split and annotation flag.
    pub fn open_entry(entry: &ManifestEntry) -> Result<Slide, SlideError> {
        let mut slide = open_slide(&entry.path)?;
        slide.record.id = entry.id.clone();
        slide.record.label = entry.label;
        slide.record.split = entry.split;
        slide.record.annotated = entry.annotated;
        Ok(slide)
    }

    pub fn record(&self) -> &SlideRecord {
        &self.record
    }

    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.record.width, self.record.height)
    }

    /// Dimensions of the whole slide at `factor`.
    pub fn level_dimensions(&self, factor: u32) -> (u32, u32) {
        (
            self.record.width.div_ceil(factor),
            self.record.height.div_ceil(factor),
        )
    }

    fn level(&self, factor: u32) -> Result<Arc<RgbImage>, SlideError> {
        let cell = &self.levels[&factor];
        let loaded = cell.get_or_init(|| {
            let img = match &self.source {
                Source::Flat => decode_rgb(&self.record.path),
                Source::Pyramid(d) => d.load_level(factor),
            };
            img.and_then(|img| {
                let expected = self.level_dimensions(factor);
                if img.dimensions() == expected {
                    Ok(Arc::new(img))
                } else {
                    Err(SlideError::CorruptFile {
                        path: self.record.path.clone(),
                        reason: format!(
                            "decoded {:?}, header said {expected:?}",
                            img.dimensions()
                        ),
                    })
                }
            })
            .map_err(|e| e.to_string())
        });
        loaded.clone().map_err(|reason| SlideError::CorruptFile {
            path: self.record.path.clone(),
            reason,
        })
    }

    /// Reads a region. Deterministic: identical requests yield identical bytes.
    pub fn read_region(&self, req: &RegionRequest) -> Result<RgbImage, SlideError> {
        let f = req.level_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(SlideError::InvalidFactor(f));
        }
        let (w, h) = self.dimensions();
        let fits = |origin: u32, len: u32, limit: u32| {
            len > 0 && (origin as u64) + (len as u64 - 1) * (f as u64) < limit as u64
        };
        if !fits(req.origin_x, req.width, w) || !fits(req.origin_y, req.height, h) {
            return Err(SlideError::OutOfBounds {
                req: *req,
                width: w,
                height: h,
            });
        }
        let stored = self.levels.contains_key(&f) && req.origin_x % f == 0 && req.origin_y % f == 0;
        if stored {
            let level = self.level(f)?;
            let (lx, ly) = (req.origin_x / f, req.origin_y / f);
            return Ok(
                image::imageops::crop_imm(level.as_ref(), lx, ly, req.width, req.height)
                    .to_image(),
            );
        }
        let base = self.level(1)?;
        Ok(resample::box_downsample(
            &base,
            req.origin_x,
            req.origin_y,
            req.width,
            req.height,
            f,
        ))
    }

    /// Whole slide downsampled by an arbitrary integer factor ≥ 1.
    pub fn thumbnail(&self, factor: u32) -> Result<RgbImage, SlideError> {
        if factor == 0 {
            return Err(SlideError::InvalidFactor(factor));
        }
        let (tw, th) = self.level_dimensions(factor);
        if factor.is_power_of_two() {
            return self.read_region(&RegionRequest {
                origin_x: 0,
                origin_y: 0,
                width: tw,
                height: th,
                level_factor: factor,
            });
        }
        let base = self.level(1)?;
        Ok(resample::box_downsample(&base, 0, 0, tw, th, factor))
    }
}
