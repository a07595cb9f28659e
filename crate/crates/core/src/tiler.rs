//! Grid tiling restricted to tissue, and native-resolution tile extraction.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slide::{RegionRequest, Slide, SlideError, SlideRecord};
use crate::tissue::TissueMask;

pub const DEFAULT_TILE_SIZE: u32 = 512;
pub const DEFAULT_TISSUE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("mask {mask_w}x{mask_h} at factor {factor} does not fit a {slide_w}x{slide_h} slide with {tile_size}px tiles")]
    MaskMismatch {
        mask_w: u32,
        mask_h: u32,
        factor: u32,
        slide_w: u32,
        slide_h: u32,
        tile_size: u32,
    },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad tile manifest {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
}

/// One grid tile. `index` is its position in the slide's row-major tile list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    #[serde(rename = "n")]
    pub index: usize,
    #[serde(rename = "x")]
    pub origin_x: u32,
    #[serde(rename = "y")]
    pub origin_y: u32,
    pub size: u32,
}

/// All tissue tiles of one slide, sorted by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSet {
    pub slide_id: String,
    pub refs: Vec<TileRef>,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// One JSON record per line: `{"slide_id", "n", "x", "y", "size"}`.
    pub fn to_jsonl(&self) -> String {
        self.refs
            .iter()
            .map(|r| serde_json::to_string(r).expect("tile refs serialize") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TileError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| TileError::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| TileError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path, slide_id: &str) -> Result<Self, TileError> {
        let text = fs::read_to_string(path).map_err(|e| TileError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let parse = |reason: String| TileError::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let refs: Vec<TileRef> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| parse(e.to_string())))
            .collect::<Result<_, _>>()?;
        for (i, r) in refs.iter().enumerate() {
            if r.index != i || r.slide_id != slide_id {
                return Err(parse(format!("record {i} is out of order or belongs to another slide")));
            }
        }
        Ok(Self {
            slide_id: slide_id.to_string(),
            refs,
        })
    }
}

/// Lays a non-overlapping `size`-stride grid anchored at (0, 0) over the
/// slide and keeps cells whose tissue fraction, measured on mask cells, is at
/// least `threshold`. Only cells lying fully inside the slide are considered.
pub fn tile_grid(
    slide: &SlideRecord,
    mask: &TissueMask,
    size: u32,
    threshold: f64,
) -> Result<TileSet, TileError> {
    let slide_id = slide.id.as_str();
    let (w, h) = (slide.width, slide.height);
    let f = mask.factor;
    let mismatch = || TileError::MaskMismatch {
        mask_w: mask.width,
        mask_h: mask.height,
        factor: f,
        slide_w: w,
        slide_h: h,
        tile_size: size,
    };
    if f == 0
        || size == 0
        || size % f != 0
        || (mask.width, mask.height) != (w.div_ceil(f), h.div_ceil(f))
        || mask.grid.len() != (mask.width * mask.height) as usize
    {
        return Err(mismatch());
    }
    let cells = size / f;
    let total = (cells * cells) as f64;
    let mut refs = Vec::new();
    for gy in 0..h / size {
        for gx in 0..w / size {
            let (mx, my) = (gx * cells, gy * cells);
            let tissue = (my..my + cells)
                .flat_map(|y| (mx..mx + cells).map(move |x| (x, y)))
                .filter(|&(x, y)| mask.get(x, y))
                .count();
            if tissue as f64 / total >= threshold {
                refs.push(TileRef {
                    slide_id: slide_id.to_string(),
                    index: refs.len(),
                    origin_x: gx * size,
                    origin_y: gy * size,
                    size,
                });
            }
        }
    }
    Ok(TileSet {
        slide_id: slide_id.to_string(),
        refs,
    })
}

/// Native-resolution pixels of one tile.
pub fn extract_tile(slide: &Slide, tile: &TileRef) -> Result<RgbImage, SlideError> {
    slide.read_region(&RegionRequest::native(
        tile.origin_x,
        tile.origin_y,
        tile.size,
        tile.size,
    ))
}

/// Tile pixels box-downsampled to `side`×`side`. `tile.size / side` must be
/// a power of two.
pub fn extract_tile_at(slide: &Slide, tile: &TileRef, side: u32) -> Result<RgbImage, SlideError> {
    if side == 0 || tile.size % side != 0 {
        return Err(SlideError::InvalidFactor(0));
    }
    slide.read_region(&RegionRequest {
        origin_x: tile.origin_x,
        origin_y: tile.origin_y,
        width: side,
        height: side,
        level_factor: tile.size / side,
    })
}
