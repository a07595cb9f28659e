//! Tile tints over the slide thumbnail.

use colomil_core::label::ClassLabel;
use colomil_core::mil::RankedTile;
use image::{Rgb, RgbImage};

/// Which class drives the tint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeatClass {
    Class(ClassLabel),
    Argmax,
}

impl HeatClass {
    pub fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("argmax") {
            return Some(HeatClass::Argmax);
        }
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .map(HeatClass::Class)
    }

    pub fn name(self) -> &'static str {
        match self {
            HeatClass::Class(c) => c.code(),
            HeatClass::Argmax => "argmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapSpec {
    pub class: HeatClass,
    /// Clamped to `[0, 1]` on construction.
    pub opacity: f64,
}

impl HeatmapSpec {
    pub fn new(class: HeatClass, opacity: f64) -> Self {
        let opacity = if opacity.is_nan() { 0.0 } else { opacity.clamp(0.0, 1.0) };
        Self { class, opacity }
    }
}

/// Green, amber, red.
pub fn class_color(c: ClassLabel) -> [u8; 3] {
    match c {
        ClassLabel::NonNeoplastic => [46, 204, 113],
        ClassLabel::LowGrade => [241, 196, 15],
        ClassLabel::HighGrade => [231, 76, 60],
    }
}

fn blend(px: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    std::array::from_fn(|i| {
        let v = (1.0 - alpha) * px[i] as f64 + alpha * color[i] as f64;
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Tints each tile footprint of a thumbnail taken at `factor`.
///
/// In class mode only tiles whose most likely class is the selected one are
/// tinted, with alpha `opacity * p(class)`. In argmax mode every tile gets
/// its argmax color at alpha `opacity`. Pixels outside tile footprints are
/// copied unchanged.
pub fn render(thumb: &RgbImage, factor: u32, tiles: &[RankedTile], spec: HeatmapSpec) -> RgbImage {
    let mut out = thumb.clone();
    let (w, h) = thumb.dimensions();
    for t in tiles {
        let top = t.probs.argmax();
        let (color, alpha) = match spec.class {
            HeatClass::Argmax => (class_color(top), spec.opacity),
            HeatClass::Class(c) if c == top => (class_color(c), spec.opacity * t.probs.get(c)),
            HeatClass::Class(_) => continue,
        };
        if alpha <= 0.0 {
            continue;
        }
        let x0 = t.tile.origin_x / factor;
        let y0 = t.tile.origin_y / factor;
        let x1 = ((t.tile.origin_x + t.tile.size) / factor).min(w);
        let y1 = ((t.tile.origin_y + t.tile.size) / factor).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = out.get_pixel(x, y).0;
                out.put_pixel(x, y, Rgb(blend(p, color, alpha)));
            }
        }
    }
    out
}
