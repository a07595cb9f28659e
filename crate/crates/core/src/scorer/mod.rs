//! The tile classifier: tile pixels to a K-class probability vector.
//!
//! [`ScorerModel`] is a small convolutional network sized for desk-scale
//! tiles. Anything implementing [`TileScorer`] can drive the ranking and
//! inference code in [`crate::mil`].

mod adam;
mod checkpoint;
mod net;
mod train;

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::label::{ClassProbs, NUM_CLASSES};

pub use adam::Adam;
pub use checkpoint::{decode_model, encode_model, load_model, save_model, CHECKPOINT_MAGIC};
pub(crate) use train::{improves, run_epoch};
pub use train::{
    evaluate_tiles, loss_and_gradient, train_step, train_supervised, BatchGradient, EpochRecord,
    LabeledTile, SupervisedOutcome, TileEvaluation, TrainConfig,
};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("tile is {got_w}x{got_h}, model expects {expected}x{expected}")]
    ShapeMismatch {
        expected: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("loss became non-finite ({0})")]
    NonFiniteLoss(f64),
    #[error("no training samples")]
    EmptyDataset,
    #[error("batch of {got} exceeds the configured batch size {max}")]
    BatchTooLarge { got: usize, max: usize },
    #[error("invalid scorer configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture of the reference classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub preset: String,
    /// Square input side in pixels.
    pub input_size: u32,
    /// Output channels of each conv block; each block halves the resolution.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
}

impl ScorerConfig {
    /// Two conv blocks on 64x64 tiles.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            input_size: 64,
            conv_channels: vec![8, 16],
            kernel_size: 3,
            num_classes: NUM_CLASSES,
        }
    }

    /// Five conv blocks on full 512x512 tiles.
    pub fn full_tile() -> Self {
        Self {
            preset: "full-tile".into(),
            input_size: 512,
            conv_channels: vec![16, 32, 64, 128, 128],
            kernel_size: 3,
            num_classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let bad = |m: &str| Err(ScorerError::InvalidConfig(m.to_string()));
        if self.num_classes != NUM_CLASSES {
            return bad("only three-class models are supported");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("need at least one conv block with nonzero channels");
        }
        let div = 1u32 << self.conv_channels.len();
        if self.input_size == 0 || self.input_size % div != 0 {
            return bad("input size must be divisible by 2^blocks");
        }
        Ok(())
    }
}

/// Pixel source for the network. Values are scaled to `[0, 1]` in CHW order.
pub trait TileInput: Sync {
    fn dimensions(&self) -> (u32, u32);
    fn to_chw(&self) -> Vec<f64>;
}

impl TileInput for RgbImage {
    fn dimensions(&self) -> (u32, u32) {
        RgbImage::dimensions(self)
    }

    fn to_chw(&self) -> Vec<f64> {
        let (w, h) = RgbImage::dimensions(self);
        let plane = (w * h) as usize;
        let mut out = vec![0.0; 3 * plane];
        for (i, p) in self.pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = p.0[c] as f64 / 255.0;
            }
        }
        out
    }
}

/// A pre-normalized CHW input, e.g. for probing the network with values
/// that cannot come from 8-bit pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTensor {
    pub side: u32,
    pub data: Vec<f64>,
}

impl TileInput for InputTensor {
    fn dimensions(&self) -> (u32, u32) {
        (self.side, self.side)
    }

    fn to_chw(&self) -> Vec<f64> {
        self.data.clone()
    }
}

/// Anything that maps tiles to class probabilities.
pub trait TileScorer: Sync {
    /// Identifies the parameters producing the scores.
    fn version(&self) -> &str;

    fn score(&self, tile: &RgbImage) -> Result<ClassProbs, ScorerError>;

    fn score_batch(&self, tiles: &[&RgbImage]) -> Result<Vec<ClassProbs>, ScorerError> {
        tiles.par_iter().map(|t| self.score(t)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ScorerModel {
    config: ScorerConfig,
    layout: net::Layout,
    params: Vec<f64>,
    version: String,
}

impl PartialEq for ScorerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ScorerModel {
    /// He-normal conv/linear weights and zero biases.
    pub fn new<R: Rng>(config: ScorerConfig, rng: &mut R) -> Result<Self, ScorerError> {
        config.validate()?;
        let layout = net::Layout::new(&config);
        let params = (0..layout.total)
            .map(|i| match layout.fan_in(i) {
                Some(fan_in) => Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std")
                    .sample(rng),
                None => 0.0,
            })
            .collect();
        Ok(Self::from_parts(config, layout, params))
    }

    pub fn from_params(config: ScorerConfig, params: Vec<f64>) -> Result<Self, ScorerError> {
        config.validate()?;
        let layout = net::Layout::new(&config);
        if params.len() != layout.total {
            return Err(ScorerError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self::from_parts(config, layout, params))
    }

    fn from_parts(config: ScorerConfig, layout: net::Layout, params: Vec<f64>) -> Self {
        let version = compute_version(&config, &params);
        Self {
            config,
            layout,
            params,
            version,
        }
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Applies `f` to the parameters and refreshes the version hash.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.version = compute_version(&self.config, &self.params);
    }

    /// Range of the linear head's bias inside [`Self::params`].
    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        self.layout.head_bias.clone()
    }

    fn check_input<I: TileInput + ?Sized>(&self, tile: &I) -> Result<(), ScorerError> {
        let (w, h) = tile.dimensions();
        let s = self.config.input_size;
        if (w, h) != (s, s) {
            return Err(ScorerError::ShapeMismatch {
                expected: s,
                got_w: w,
                got_h: h,
            });
        }
        Ok(())
    }

    pub(crate) fn forward<I: TileInput + ?Sized>(
        &self,
        tile: &I,
    ) -> Result<net::Forward, ScorerError> {
        self.check_input(tile)?;
        Ok(net::forward(&self.layout, &self.params, tile.to_chw()))
    }

    /// Raw probabilities for any input, including non-pixel tensors.
    pub fn predict<I: TileInput + ?Sized>(&self, tile: &I) -> Result<Vec<f64>, ScorerError> {
        Ok(self.forward(tile)?.probs)
    }
}

impl TileScorer for ScorerModel {
    fn version(&self) -> &str {
        &self.version
    }

    fn score(&self, tile: &RgbImage) -> Result<ClassProbs, ScorerError> {
        let probs = self.forward(tile)?.probs;
        let p: [f64; NUM_CLASSES] = probs.try_into().expect("three logits");
        // Softmax outputs are on the simplex up to rounding.
        Ok(ClassProbs::new(p).expect("softmax output is a valid simplex"))
    }
}

fn compute_version(config: &ScorerConfig, params: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}
