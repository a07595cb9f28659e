//! Tissue/background separation by Otsu's threshold on HSV saturation.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::slide::{Slide, SlideError};

pub const DEFAULT_MASK_FACTOR: u32 = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OtsuError {
    #[error("histogram has fewer than two populated intensities")]
    DegenerateHistogram,
}

#[derive(Debug, Error)]
pub enum MaskIoError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad mask file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

/// Per-pixel HSV saturation scaled to 0..=255.
///
/// `S = round(255 * (max - min) / max)` with round-half-up in integer
/// arithmetic, and `S = 0` for black pixels.
pub fn saturation_channel(rgb: &RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        image::Luma([pixel_saturation(rgb.get_pixel(x, y).0)])
    })
}

#[inline]
pub fn pixel_saturation([r, g, b]: [u8; 3]) -> u8 {
    let max = r.max(g).max(b) as u32;
    if max == 0 {
        return 0;
    }
    let min = r.min(g).min(b) as u32;
    // floor((2 * 255 * (max - min) + max) / (2 * max)) == round-half-up
    ((510 * (max - min) + max) / (2 * max)) as u8
}

pub fn histogram(gray: &GrayImage) -> [u64; 256] {
    let mut h = [0u64; 256];
    for p in gray.pixels() {
        h[p.0[0] as usize] += 1;
    }
    h
}

/// Otsu's threshold: the `t` maximizing between-class variance of the split
/// `{<= t}` vs `{> t}`, smallest `t` on ties.
///
/// Between-class variance is `(N*S0 - N0*S)^2 / (N^2 * N0 * N1)`; the common
/// `N^2` is dropped and candidates are compared exactly as rationals.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, OtsuError> {
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let mut best: Option<(u8, BigUint, u128)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..255usize {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (a, b) = (n * s0, n0 * s);
        let diff = a.abs_diff(b);
        let num = BigUint::from(diff).pow(2);
        let den = n0 * n1;
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * BigUint::from(*bd) > bn * BigUint::from(den),
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    // No split with both classes populated means a single intensity.
    best.map(|(t, _, _)| t).ok_or(OtsuError::DegenerateHistogram)
}

/// Binary tissue map at a downsample factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TissueMask {
    pub factor: u32,
    pub width: u32,
    pub height: u32,
    /// `None` when the saturation histogram was degenerate; the mask is
    /// then all background.
    pub otsu_threshold: Option<u8>,
    #[serde(skip)]
    pub grid: Vec<bool>,
}

impl TissueMask {
    pub fn new_filled(factor: u32, width: u32, height: u32, value: bool) -> Self {
        Self {
            factor,
            width,
            height,
            otsu_threshold: None,
            grid: vec![value; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.grid[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.grid[(y * self.width + x) as usize] = v;
    }

    /// True when segmentation found no usable saturation signal.
    pub fn is_degenerate(&self) -> bool {
        self.otsu_threshold.is_none()
    }

    pub fn tissue_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    /// Writes `<dir>/<slide_id>.mask.png` (1-bit grayscale, tissue = white)
    /// and `<dir>/<slide_id>.mask.json` with factor and threshold.
    pub fn save(&self, dir: &Path, slide_id: &str) -> Result<(), MaskIoError> {
        let png_path = dir.join(format!("{slide_id}.mask.png"));
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e| MaskIoError::Io { path, source: e }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let file = fs::File::create(&png_path).map_err(io(&png_path))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let fmt_err = |e: png::EncodingError| MaskIoError::Format {
            path: png_path.clone(),
            reason: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(fmt_err)?;
        let stride = self.width.div_ceil(8) as usize;
        let mut packed = vec![0u8; stride * self.height as usize];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    packed[y as usize * stride + (x / 8) as usize] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&packed).map_err(fmt_err)?;
        writer.finish().map_err(fmt_err)?;
        let json_path = dir.join(format!("{slide_id}.mask.json"));
        let meta = serde_json::to_string_pretty(self).expect("mask metadata serializes");
        fs::write(&json_path, meta).map_err(io(&json_path))
    }

    pub fn load(dir: &Path, slide_id: &str) -> Result<Self, MaskIoError> {
        let json_path = dir.join(format!("{slide_id}.mask.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| MaskIoError::Io {
            path: json_path.clone(),
            source: e,
        })?;
        let mut mask: TissueMask =
            serde_json::from_str(&text).map_err(|e| MaskIoError::Format {
                path: json_path.clone(),
                reason: e.to_string(),
            })?;
        let png_path = dir.join(format!("{slide_id}.mask.png"));
        let fmt = |reason: String| MaskIoError::Format {
            path: png_path.clone(),
            reason,
        };
        let file = fs::File::open(&png_path).map_err(|e| MaskIoError::Io {
            path: png_path.clone(),
            source: e,
        })?;
        let mut reader = png::Decoder::new(std::io::BufReader::new(file))
            .read_info()
            .map_err(|e| fmt(e.to_string()))?;
        let info = reader.info();
        if (info.width, info.height) != (mask.width, mask.height)
            || info.bit_depth != png::BitDepth::One
            || info.color_type != png::ColorType::Grayscale
        {
            return Err(fmt("mask image does not match its metadata".into()));
        }
        let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| fmt("mask too large".into()))?];
        let frame = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let stride = frame.line_size;
        mask.grid = (0..mask.height)
            .flat_map(|y| (0..mask.width).map(move |x| (x, y)))
            .map(|(x, y)| buf[y as usize * stride + (x / 8) as usize] & (0x80 >> (x % 8)) != 0)
            .collect();
        Ok(mask)
    }
}

/// Segments an already downsampled RGB image.
pub fn segment_thumbnail(thumb: &RgbImage, factor: u32) -> TissueMask {
    let sat = saturation_channel(thumb);
    let (w, h) = sat.dimensions();
    match otsu_threshold(&histogram(&sat)) {
        Ok(t) => TissueMask {
            factor,
            width: w,
            height: h,
            otsu_threshold: Some(t),
            grid: sat.pixels().map(|p| p.0[0] > t).collect(),
        },
        Err(OtsuError::DegenerateHistogram) => TissueMask::new_filled(factor, w, h, false),
    }
}

/// Thumbnails the slide at `factor` and thresholds its saturation.
/// A degenerate histogram yields an all-background mask and a warning.
pub fn segment_tissue(slide: &Slide, factor: u32) -> Result<TissueMask, SlideError> {
    let thumb = slide.thumbnail(factor)?;
    let mask = segment_thumbnail(&thumb, factor);
    if mask.is_degenerate() {
        warn!(slide = slide.id(), "no saturation signal; whole slide treated as background");
    }
    Ok(mask)
}
