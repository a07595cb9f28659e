//! A tiny MIL world: solid-color 8px tiles held in memory.

use colomil_core::label::ClassLabel;
use colomil_core::mil::{MilConfig, MilDataset, MilSlide, SamplingScope, TileBank};
use colomil_core::scorer::{ScorerConfig, ScorerModel, TrainConfig};
use colomil_core::slide::Split;
use colomil_core::tiler::TileRef;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: u32 = 8;

pub fn tiny() -> ScorerConfig {
    ScorerConfig {
        preset: "tiny".into(),
        input_size: SIDE,
        conv_channels: vec![4],
        kernel_size: 3,
        num_classes: 3,
    }
}

pub fn model(seed: u64) -> ScorerModel {
    ScorerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn tile(slide: &str, n: usize) -> TileRef {
    TileRef {
        slide_id: slide.into(),
        index: n,
        origin_x: n as u32 * SIDE,
        origin_y: 0,
        size: SIDE,
    }
}

/// Color of a tile drawn towards the class hue: red HG, green LG, blue NNeo.
pub fn class_color(label: ClassLabel, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut c = [rng.gen_range(20..60u8), rng.gen_range(20..60u8), rng.gen_range(20..60u8)];
    c[2 - label.index()] = rng.gen_range(200..=255u8);
    c
}

pub struct World {
    pub bank: TileBank,
    pub slides: Vec<MilSlide>,
}

/// Slides with the given tile counts, splits and labels. Tiles of a slide
/// labeled L mix NNeo tiles with a few L tiles.
pub fn world(specs: &[(usize, Split, ClassLabel)], seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = TileBank::new();
    let mut slides = Vec::new();
    for (i, &(n, split, label)) in specs.iter().enumerate() {
        let id = format!("t{i:02}");
        let tiles: Vec<TileRef> = (0..n).map(|k| tile(&id, k)).collect();
        for t in &tiles {
            let lesion = rng.gen_bool(0.3);
            let l = if lesion { label } else { ClassLabel::NonNeoplastic };
            bank.insert(t, RgbImage::from_pixel(SIDE, SIDE, Rgb(class_color(l, &mut rng))));
        }
        slides.push(MilSlide {
            id,
            split,
            label: Some(label),
            tiles,
        });
    }
    World { bank, slides }
}

impl World {
    pub fn dataset(&self) -> MilDataset<'_, TileBank> {
        MilDataset {
            source: &self.bank,
            slides: self.slides.clone(),
            annotated_train: Vec::new(),
            annotated_val: Vec::new(),
        }
    }
}

pub fn mil_config(m: usize, epochs_weak: usize) -> MilConfig {
    MilConfig {
        train: TrainConfig {
            lr: 0.02,
            weight_decay: 0.0,
            batch_train: 8,
            batch_infer: 16,
            epochs_full: 3,
            epochs_weak,
            seed: 4,
            deterministic: true,
        },
        m,
        top_n: 5,
        scope: SamplingScope::TrainAndVal,
        sample_validation: true,
        record_full_rankings: false,
    }
}
