use std::path::Path;

use colomil_core::slide::{open_slide, Slide, SlideError};
use colomil_core::tiler::{extract_tile, extract_tile_at, tile_grid, TileRef};
use colomil_core::tissue::{segment_thumbnail, segment_tissue};
use image::{Rgb, RgbImage};

const PINK: Rgb<u8> = Rgb([236, 170, 200]);
const WHITE: Rgb<u8> = Rgb([248, 248, 248]);

fn write_slide(dir: &Path, name: &str, img: &RgbImage) -> Slide {
    let path = dir.join(name);
    img.save(&path).unwrap();
    open_slide(&path).unwrap()
}

#[test]
fn pink_rectangle_on_white_is_exactly_the_tissue() {
    let img = RgbImage::from_fn(64, 48, |x, y| {
        if (16..48).contains(&x) && (8..40).contains(&y) {
            PINK
        } else {
            WHITE
        }
    });
    let mask = segment_thumbnail(&img, 1);
    for y in 0..48 {
        for x in 0..64 {
            let inside = (16..48).contains(&x) && (8..40).contains(&y);
            assert_eq!(mask.get(x, y), inside, "({x}, {y})");
        }
    }
    assert_eq!(mask.tissue_count(), 32 * 32);
}

#[test]
fn white_corner_is_background_and_blocks_its_tile() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::from_fn(256, 256, |x, y| if x >= 192 && y >= 192 { WHITE } else { PINK });
    let slide = write_slide(dir.path(), "corner.png", &img);
    let mask = segment_tissue(&slide, 4).unwrap();
    assert_eq!((mask.width, mask.height), (64, 64));
    assert!(!mask.get(63, 63));
    assert!(mask.get(0, 0));
    assert_eq!(mask.tissue_count(), 64 * 64 - 16 * 16);

    let tiles = tile_grid(slide.record(), &mask, 64, 1.0).unwrap();
    assert_eq!(tiles.len(), 15);
    assert!(!tiles.refs.iter().any(|t| (t.origin_x, t.origin_y) == (192, 192)));
}

#[test]
fn uniform_slide_has_no_tissue() {
    let dir = tempfile::tempdir().unwrap();
    let slide = write_slide(dir.path(), "blank.png", &RgbImage::from_pixel(128, 128, WHITE));
    let mask = segment_tissue(&slide, 4).unwrap();
    assert!(mask.is_degenerate());
    assert_eq!(mask.tissue_count(), 0);
    assert!(tile_grid(slide.record(), &mask, 64, 1.0).unwrap().is_empty());
}

#[test]
fn tiles_past_the_edge_are_out_of_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let slide = write_slide(dir.path(), "wide.png", &RgbImage::from_pixel(768, 512, PINK));
    let t = TileRef {
        slide_id: "wide".into(),
        index: 1,
        origin_x: 512,
        origin_y: 0,
        size: 512,
    };
    assert!(matches!(extract_tile(&slide, &t), Err(SlideError::OutOfBounds { .. })));
    let inside = TileRef { origin_x: 0, index: 0, ..t };
    let px = extract_tile(&slide, &inside).unwrap();
    assert_eq!(px.dimensions(), (512, 512));
    assert_eq!(*px.get_pixel(511, 511), PINK);
    let small = extract_tile_at(&slide, &inside, 64).unwrap();
    assert_eq!(small.dimensions(), (64, 64));
    assert_eq!(*small.get_pixel(0, 0), PINK);
    assert!(extract_tile_at(&slide, &inside, 100).is_err());
}

#[test]
fn slide_id_comes_from_the_file_stem() {
    let dir = tempfile::tempdir().unwrap();
    let slide = write_slide(dir.path(), "case-17.png", &RgbImage::from_pixel(32, 16, PINK));
    assert_eq!(slide.id(), "case-17");
    assert_eq!(slide.dimensions(), (32, 16));
}
