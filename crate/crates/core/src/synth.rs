//! Procedural slides with known tile-level ground truth.
//!
//! Each slide is an elliptical tissue region on a noisy white background.
//! The slide is divided into `cell`-sized grid cells aligned with the tile
//! grid; lesions are contiguous groups of whole cells lying fully inside the
//! tissue. Every class has its own chroma and texture frequency.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::ClassLabel;
use crate::rng::substream;
use crate::slide::{DatasetManifest, ManifestEntry, ManifestError, Split, TileAnnotation};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic dataset settings: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {}: {reason}", path.display())]
    Encode { path: PathBuf, reason: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub seed: u64,
    /// Grid cell side, equal to the tile size used downstream.
    pub cell: u32,
    pub min_cells: u32,
    pub max_cells: u32,
    /// Extra pixels beyond the last full cell, drawn from `0..=max_extra`.
    pub max_extra: u32,
    /// Fraction of training slides that ship tile annotations.
    pub annotated_fraction: f64,
    /// 0 = clean textures; larger values add pixel noise and stain jitter.
    pub difficulty: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 60,
            seed: 7,
            cell: 64,
            min_cells: 6,
            max_cells: 10,
            max_extra: 40,
            annotated_fraction: 1.0 / 3.0,
            difficulty: 0.3,
        }
    }
}

/// Ground truth of one generated slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlide {
    pub id: String,
    pub label: ClassLabel,
    pub split: Split,
    pub annotated: bool,
    pub image: RgbImage,
    /// Label of every cell lying fully inside the tissue.
    pub cells: Vec<TileAnnotation>,
}

const BACKGROUND: [f64; 3] = [243.0, 243.0, 243.0];

fn base_color(label: ClassLabel) -> [f64; 3] {
    match label {
        ClassLabel::NonNeoplastic => [236.0, 170.0, 200.0],
        ClassLabel::LowGrade => [180.0, 110.0, 200.0],
        ClassLabel::HighGrade => [120.0, 60.0, 170.0],
    }
}

struct Texture {
    angle: f64,
    phase: f64,
    tint: [f64; 3],
}

impl Texture {
    fn shade(&self, label: ClassLabel, x: f64, y: f64) -> f64 {
        let u = x * self.angle.cos() + y * self.angle.sin();
        match label {
            ClassLabel::NonNeoplastic => 1.0 + 0.08 * (TAU * u / 32.0 + self.phase).sin(),
            ClassLabel::LowGrade => 1.0 + 0.12 * (TAU * u / 12.0 + self.phase).sin(),
            ClassLabel::HighGrade => {
                1.0 + 0.18 * (TAU * x / 6.0 + self.phase).sin() * (TAU * y / 6.0).sin()
            }
        }
    }
}

/// Grows a 4-connected group of up to `size` cells from a random start.
fn grow_blob<R: Rng>(
    rng: &mut R,
    free: &[(u32, u32)],
    size: usize,
) -> Vec<(u32, u32)> {
    if free.is_empty() || size == 0 {
        return Vec::new();
    }
    let start = *free.choose(rng).expect("non-empty");
    let mut blob = vec![start];
    while blob.len() < size {
        let mut frontier: Vec<(u32, u32)> = free
            .iter()
            .copied()
            .filter(|c| !blob.contains(c))
            .filter(|&(x, y)| {
                blob.iter()
                    .any(|&(bx, by)| x.abs_diff(bx) + y.abs_diff(by) == 1)
            })
            .collect();
        if frontier.is_empty() {
            break;
        }
        frontier.sort_unstable();
        blob.push(*frontier.choose(rng).expect("non-empty"));
    }
    blob
}

fn render(cfg: &SynthConfig, id: &str, label: ClassLabel) -> (RgbImage, Vec<TileAnnotation>) {
    let mut rng = substream(cfg.seed, &format!("data/{id}"));
    let c = cfg.cell;
    let cols = rng.gen_range(cfg.min_cells..=cfg.max_cells);
    let rows = rng.gen_range(cfg.min_cells..=cfg.max_cells);
    let w = cols * c + rng.gen_range(0..=cfg.max_extra);
    let h = rows * c + rng.gen_range(0..=cfg.max_extra);
    let (cx, cy) = (
        w as f64 / 2.0 + rng.gen_range(-0.03..0.03) * w as f64,
        h as f64 / 2.0 + rng.gen_range(-0.03..0.03) * h as f64,
    );
    let (ax, ay) = (
        rng.gen_range(0.40..0.48) * w as f64,
        rng.gen_range(0.40..0.48) * h as f64,
    );
    let inside = |x: f64, y: f64| ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2) <= 1.0;

    let mut interior = Vec::new();
    for gy in 0..rows {
        for gx in 0..cols {
            let (x0, y0) = ((gx * c) as f64, (gy * c) as f64);
            let (x1, y1) = (x0 + c as f64, y0 + c as f64);
            if [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(x, y)| inside(x, y))
            {
                interior.push((gx, gy));
            }
        }
    }
    let mut cell_label = vec![ClassLabel::NonNeoplastic; (cols * rows) as usize];
    let cap = (interior.len() / 2).max(1);
    let place = |rng: &mut _, lesion: ClassLabel, lo: usize, hi: usize, labels: &mut Vec<ClassLabel>| {
        let free: Vec<(u32, u32)> = interior
            .iter()
            .copied()
            .filter(|&(x, y)| labels[(y * cols + x) as usize] == ClassLabel::NonNeoplastic)
            .collect();
        let size = Rng::gen_range(rng, lo..=hi).min(cap);
        for (x, y) in grow_blob(rng, &free, size) {
            labels[(y * cols + x) as usize] = lesion;
        }
    };
    match label {
        ClassLabel::NonNeoplastic => {}
        ClassLabel::LowGrade => place(&mut rng, ClassLabel::LowGrade, 4, 8, &mut cell_label),
        ClassLabel::HighGrade => {
            place(&mut rng, ClassLabel::HighGrade, 3, 6, &mut cell_label);
            if rng.gen_bool(0.5) {
                place(&mut rng, ClassLabel::LowGrade, 3, 5, &mut cell_label);
            }
        }
    }

    let jitter = 0.03 + 0.1 * cfg.difficulty;
    let tex = Texture {
        angle: rng.gen_range(0.0..TAU),
        phase: rng.gen_range(0.0..TAU),
        tint: [
            1.0 + rng.gen_range(-jitter..jitter),
            1.0 + rng.gen_range(-jitter..jitter),
            1.0 + rng.gen_range(-jitter..jitter),
        ],
    };
    let tissue_noise = Normal::new(0.0, 4.0 + 24.0 * cfg.difficulty).expect("positive sd");
    let bg_noise = Normal::new(0.0, 3.0).expect("positive sd");
    let img = RgbImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let px: [f64; 3] = if inside(fx, fy) {
            let (gx, gy) = (x / c, y / c);
            let l = if gx < cols && gy < rows {
                cell_label[(gy * cols + gx) as usize]
            } else {
                ClassLabel::NonNeoplastic
            };
            let s = tex.shade(l, fx, fy);
            let b = base_color(l);
            let n = tissue_noise.sample(&mut rng);
            [0, 1, 2].map(|i| b[i] * tex.tint[i] * s + n)
        } else {
            let n = bg_noise.sample(&mut rng);
            [0, 1, 2].map(|i| BACKGROUND[i] + n + bg_noise.sample(&mut rng) * 0.5)
        };
        Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    let cells = interior
        .iter()
        .map(|&(gx, gy)| TileAnnotation {
            x: gx * c,
            y: gy * c,
            size: c,
            label: cell_label[(gy * cols + gx) as usize],
        })
        .collect();
    (img, cells)
}

/// Slide ids, labels, splits and annotation flags, stratified by class.
fn plan(cfg: &SynthConfig) -> Vec<(String, ClassLabel, Split, bool)> {
    let mut rng = substream(cfg.seed, "data/split");
    let mut out: Vec<(String, ClassLabel, Split, bool)> = Vec::with_capacity(cfg.n_slides);
    for (ci, label) in ClassLabel::ALL.iter().enumerate() {
        let mut ids: Vec<usize> = (0..cfg.n_slides).filter(|i| i % 3 == ci).collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (n as f64 * 0.6).round() as usize;
        let n_val = (n as f64 * 0.2).round() as usize;
        let n_ann = (n_train as f64 * cfg.annotated_fraction).ceil() as usize;
        for (k, i) in ids.into_iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.push((format!("syn{i:03}"), *label, split, k < n_ann));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn generate_slides(cfg: &SynthConfig) -> Result<Vec<SynthSlide>, SynthError> {
    if cfg.n_slides == 0
        || cfg.cell == 0
        || cfg.min_cells < 3
        || cfg.min_cells > cfg.max_cells
        || !(0.0..=1.0).contains(&cfg.annotated_fraction)
        || !(0.0..=1.0).contains(&cfg.difficulty)
    {
        return Err(SynthError::InvalidConfig(format!("{cfg:?}")));
    }
    Ok(plan(cfg)
        .into_par_iter()
        .map(|(id, label, split, annotated)| {
            let (image, cells) = render(cfg, &id, label);
            SynthSlide {
                id,
                label,
                split,
                annotated,
                image,
                cells,
            }
        })
        .collect())
}

/// Writes `slides/`, `annotations/`, `truth/` and `manifest.jsonl` under
/// `out`. Paths in the manifest are relative to `out`.
pub fn write_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest, SynthError> {
    let slides = generate_slides(cfg)?;
    for sub in ["slides", "annotations", "truth"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| SynthError::Io { path: d, source: e })?;
    }
    let write = |path: PathBuf, text: String| {
        fs::write(&path, text).map_err(|e| SynthError::Io { path, source: e })
    };
    slides.par_iter().try_for_each(|s| {
        let p = out.join(format!("slides/{}.png", s.id));
        s.image.save(&p).map_err(|e| SynthError::Encode {
            path: p.clone(),
            reason: e.to_string(),
        })
    })?;
    let mut entries = Vec::with_capacity(slides.len());
    for s in &slides {
        let cells = TileAnnotation::to_jsonl(&s.cells);
        write(out.join(format!("truth/{}.truth.jsonl", s.id)), cells.clone())?;
        let annotations = if s.annotated {
            let rel = PathBuf::from(format!("annotations/{}.annotations.jsonl", s.id));
            write(out.join(&rel), cells)?;
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            path: PathBuf::from(format!("slides/{}.png", s.id)),
            label: Some(s.label),
            split: s.split,
            annotated: s.annotated,
            annotations,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.save(out.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Ground-truth label of the cell at `(x, y)`; cells not listed are NNeo.
pub fn truth_label(cells: &[TileAnnotation], x: u32, y: u32) -> ClassLabel {
    cells
        .iter()
        .find(|a| a.x == x && a.y == y)
        .map_or(ClassLabel::NonNeoplastic, |a| a.label)
}
