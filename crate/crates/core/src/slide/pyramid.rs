//! Directory-based multi-resolution slide layout.
//!
//! A pyramid is a directory holding a plain-text descriptor named
//! [`DESCRIPTOR_NAME`] and one or more image files per level:
//!
//! ```text
//! colomil-pyramid 1
//! size 2048 1024
//! level 1 2048 1024 512
//! level 4 512 256 512
//! tile 1 0 0 l1/0_0.png
//! tile 1 1 0 l1/1_0.png
//! ...
//! tile 4 0 0 l4/0_0.png
//! ```
//!
//! `level <factor> <width> <height> <tile_size>` declares a level; factors are
//! powers of two and `width = ceil(size_w / factor)`. `tile <factor> <col> <row>
//! <path>` places an image at `(col * tile_size, row * tile_size)` of that
//! level; every grid position must be covered. Paths are relative to the
//! directory. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use super::resample::box_downsample;
use super::SlideError;

pub const DESCRIPTOR_NAME: &str = "pyramid.txt";
const MAGIC: &str = "colomil-pyramid 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidLevel {
    pub factor: u32,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    /// Tile image paths keyed by (col, row).
    pub tiles: BTreeMap<(u32, u32), PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidDescriptor {
    pub width: u32,
    pub height: u32,
    /// Levels keyed by downsample factor; factor 1 is always present.
    pub levels: BTreeMap<u32, PyramidLevel>,
}

fn corrupt(path: &Path, msg: impl Into<String>) -> SlideError {
    SlideError::CorruptFile {
        path: path.to_path_buf(),
        reason: msg.into(),
    }
}

pub(crate) fn div_ceil(a: u32, b: u32) -> u32 {
    a.div_ceil(b)
}

impl PyramidDescriptor {
    pub fn read(dir: &Path) -> Result<Self, SlideError> {
        let path = dir.join(DESCRIPTOR_NAME);
        let text = fs::read_to_string(&path).map_err(|e| SlideError::Io {
            path: path.clone(),
            source: e,
        })?;
        Self::parse(&text, dir).map_err(|msg| corrupt(&path, msg))
    }

    pub(crate) fn parse(text: &str, dir: &Path) -> Result<Self, String> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(MAGIC) {
            return Err(format!("missing `{MAGIC}` header"));
        }
        let mut size = None;
        let mut levels: BTreeMap<u32, PyramidLevel> = BTreeMap::new();
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<u32, String> {
                fields
                    .get(i)
                    .ok_or_else(|| format!("truncated line `{line}`"))?
                    .parse::<u32>()
                    .map_err(|e| format!("bad number in `{line}`: {e}"))
            };
            match fields[0] {
                "size" => size = Some((num(1)?, num(2)?)),
                "level" => {
                    let factor = num(1)?;
                    if !factor.is_power_of_two() {
                        return Err(format!("level factor {factor} is not a power of two"));
                    }
                    let level = PyramidLevel {
                        factor,
                        width: num(2)?,
                        height: num(3)?,
                        tile_size: num(4)?,
                        tiles: BTreeMap::new(),
                    };
                    if level.tile_size == 0 {
                        return Err("tile size must be positive".into());
                    }
                    if levels.insert(factor, level).is_some() {
                        return Err(format!("duplicate level {factor}"));
                    }
                }
                "tile" => {
                    let factor = num(1)?;
                    let key = (num(2)?, num(3)?);
                    let rel = fields
                        .get(4)
                        .ok_or_else(|| format!("tile line without path: `{line}`"))?;
                    let level = levels
                        .get_mut(&factor)
                        .ok_or_else(|| format!("tile for undeclared level {factor}"))?;
                    level.tiles.insert(key, dir.join(rel));
                }
                other => return Err(format!("unknown directive `{other}`")),
            }
        }
        let (width, height) = size.ok_or("missing `size` line")?;
        if width == 0 || height == 0 {
            return Err("slide dimensions must be positive".into());
        }
        if !levels.contains_key(&1) {
            return Err("missing level with factor 1".into());
        }
        for level in levels.values() {
            let (ew, eh) = (div_ceil(width, level.factor), div_ceil(height, level.factor));
            if (level.width, level.height) != (ew, eh) {
                return Err(format!(
                    "level {} is {}x{}, expected {ew}x{eh}",
                    level.factor, level.width, level.height
                ));
            }
            let cols = div_ceil(level.width, level.tile_size);
            let rows = div_ceil(level.height, level.tile_size);
            for r in 0..rows {
                for c in 0..cols {
                    if !level.tiles.contains_key(&(c, r)) {
                        return Err(format!("level {} is missing tile ({c}, {r})", level.factor));
                    }
                }
            }
        }
        Ok(Self {
            width,
            height,
            levels,
        })
    }

    /// Decodes and stitches all tiles of one level.
    pub(crate) fn load_level(&self, factor: u32) -> Result<RgbImage, SlideError> {
        let level = &self.levels[&factor];
        let mut canvas = RgbImage::new(level.width, level.height);
        for (&(c, r), path) in &level.tiles {
            let tile = super::decode_rgb(path)?;
            let (x, y) = (c * level.tile_size, r * level.tile_size);
            let ew = level.tile_size.min(level.width.saturating_sub(x));
            let eh = level.tile_size.min(level.height.saturating_sub(y));
            if tile.dimensions() != (ew, eh) {
                return Err(corrupt(
                    path,
                    format!("tile is {:?}, expected {ew}x{eh}", tile.dimensions()),
                ));
            }
            image::imageops::replace(&mut canvas, &tile, x as i64, y as i64);
        }
        Ok(canvas)
    }
}

/// Writes `image` as a pyramid directory with the given level factors
/// (factor 1 is always included). Reduced levels are box-filtered from level 0.
pub fn write_pyramid(
    dir: &Path,
    image: &RgbImage,
    factors: &[u32],
    tile_size: u32,
) -> Result<(), SlideError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e| SlideError::Io { path, source: e }
    };
    assert!(tile_size > 0, "tile size must be positive");
    fs::create_dir_all(dir).map_err(io(dir))?;
    let (w, h) = image.dimensions();
    let mut all: Vec<u32> = factors.to_vec();
    all.push(1);
    all.sort_unstable();
    all.dedup();
    let mut desc = format!("{MAGIC}\nsize {w} {h}\n");
    let mut tile_lines = String::new();
    for &f in &all {
        if !f.is_power_of_two() {
            return Err(SlideError::InvalidFactor(f));
        }
        let (lw, lh) = (div_ceil(w, f), div_ceil(h, f));
        let level = box_downsample(image, 0, 0, lw, lh, f);
        desc.push_str(&format!("level {f} {lw} {lh} {tile_size}\n"));
        let sub = dir.join(format!("l{f}"));
        fs::create_dir_all(&sub).map_err(io(&sub))?;
        for r in 0..div_ceil(lh, tile_size) {
            for c in 0..div_ceil(lw, tile_size) {
                let (x, y) = (c * tile_size, r * tile_size);
                let tile = image::imageops::crop_imm(
                    &level,
                    x,
                    y,
                    tile_size.min(lw - x),
                    tile_size.min(lh - y),
                )
                .to_image();
                let rel = format!("l{f}/{c}_{r}.png");
                let path = dir.join(&rel);
                tile.save(&path).map_err(|e| SlideError::Encode {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                tile_lines.push_str(&format!("tile {f} {c} {r} {rel}\n"));
            }
        }
    }
    desc.push_str(&tile_lines);
    let path = dir.join(DESCRIPTOR_NAME);
    fs::write(&path, desc).map_err(io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_missing_tiles_and_bad_dims() {
        let dir = Path::new("/x");
        let ok = "colomil-pyramid 1\nsize 10 6\nlevel 1 10 6 8\ntile 1 0 0 a.png\ntile 1 1 0 b.png\n";
        let d = PyramidDescriptor::parse(ok, dir).unwrap();
        assert_eq!((d.width, d.height), (10, 6));
        assert_eq!(d.levels[&1].tiles.len(), 2);

        let missing = "colomil-pyramid 1\nsize 10 6\nlevel 1 10 6 8\ntile 1 0 0 a.png\n";
        assert!(PyramidDescriptor::parse(missing, dir).is_err());
        let bad_dims = "colomil-pyramid 1\nsize 10 6\nlevel 1 10 6 16\nlevel 2 4 3 16\ntile 1 0 0 a\ntile 2 0 0 b\n";
        assert!(PyramidDescriptor::parse(bad_dims, dir).is_err());
        let not_pow2 = "colomil-pyramid 1\nsize 10 6\nlevel 3 4 2 16\n";
        assert!(PyramidDescriptor::parse(not_pow2, dir).is_err());
        assert!(PyramidDescriptor::parse("hello", dir).is_err());
    }
}
