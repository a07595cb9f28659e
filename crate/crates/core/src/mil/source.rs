use std::borrow::Cow;
use std::collections::HashMap;

use image::RgbImage;
use rayon::prelude::*;

use super::MilError;
use crate::slide::Slide;
use crate::tiler::{extract_tile_at, TileRef};

/// Supplies tile pixels by reference.
pub trait TileSource: Sync {
    fn load(&self, tile: &TileRef) -> Result<Cow<'_, RgbImage>, MilError>;
}

type TileKey = (String, u32, u32, u32);

fn key(t: &TileRef) -> TileKey {
    (t.slide_id.clone(), t.origin_x, t.origin_y, t.size)
}

/// Decoded tiles held in memory, keyed by slide and footprint.
#[derive(Default)]
pub struct TileBank {
    tiles: HashMap<TileKey, RgbImage>,
}

impl TileBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tile: &TileRef, pixels: RgbImage) {
        self.tiles.insert(key(tile), pixels);
    }

    pub fn contains(&self, tile: &TileRef) -> bool {
        self.tiles.contains_key(&key(tile))
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Extracts and stores every listed tile of `slide` that is not
    /// already present, downsampled to `side` pixels.
    pub fn fill_from(&mut self, slide: &Slide, tiles: &[TileRef], side: u32) -> Result<(), MilError> {
        let missing: Vec<&TileRef> = tiles.iter().filter(|t| !self.contains(t)).collect();
        let pixels = missing
            .par_iter()
            .map(|t| extract_tile_at(slide, t, side))
            .collect::<Result<Vec<_>, _>>()?;
        for (t, px) in missing.into_iter().zip(pixels) {
            self.insert(t, px);
        }
        Ok(())
    }
}

impl TileSource for TileBank {
    fn load(&self, tile: &TileRef) -> Result<Cow<'_, RgbImage>, MilError> {
        self.tiles
            .get(&key(tile))
            .map(Cow::Borrowed)
            .ok_or_else(|| MilError::MissingTile {
                slide_id: tile.slide_id.clone(),
                x: tile.origin_x,
                y: tile.origin_y,
            })
    }
}

/// Reads tiles from open slides on demand, downsampled to `side` pixels.
pub struct SlideTileSource<'a> {
    slides: HashMap<&'a str, &'a Slide>,
    side: u32,
}

impl<'a> SlideTileSource<'a> {
    pub fn new(slides: impl IntoIterator<Item = &'a Slide>, side: u32) -> Self {
        Self {
            slides: slides.into_iter().map(|s| (s.id(), s)).collect(),
            side,
        }
    }
}

impl TileSource for SlideTileSource<'_> {
    fn load(&self, tile: &TileRef) -> Result<Cow<'_, RgbImage>, MilError> {
        let slide = self
            .slides
            .get(tile.slide_id.as_str())
            .ok_or_else(|| MilError::MissingTile {
                slide_id: tile.slide_id.clone(),
                x: tile.origin_x,
                y: tile.origin_y,
            })?;
        Ok(Cow::Owned(extract_tile_at(slide, tile, self.side)?))
    }
}
