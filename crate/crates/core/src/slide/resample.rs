//! Box-filter downsampling.

use image::{Rgb, RgbImage};

/// Averages `factor`×`factor` blocks of `src` starting at `(x0, y0)` into an
/// `out_w`×`out_h` image. Blocks clipped by the source edge average only the
/// pixels that exist. Channel means are rounded half-up.
///
/// Callers guarantee that every output pixel has at least one source pixel.
pub(crate) fn box_downsample(
    src: &RgbImage,
    x0: u32,
    y0: u32,
    out_w: u32,
    out_h: u32,
    factor: u32,
) -> RgbImage {
    if factor == 1 {
        return image::imageops::crop_imm(src, x0, y0, out_w, out_h).to_image();
    }
    let (sw, sh) = src.dimensions();
    let mut out = RgbImage::new(out_w, out_h);
    let mut acc = vec![[0u64; 3]; out_w as usize];
    let mut counts = vec![0u64; out_w as usize];
    for oy in 0..out_h {
        acc.iter_mut().for_each(|a| *a = [0; 3]);
        counts.iter_mut().for_each(|c| *c = 0);
        let ys = y0 + oy * factor;
        let ye = (ys + factor).min(sh);
        for y in ys..ye {
            for ox in 0..out_w {
                let xs = x0 + ox * factor;
                let xe = (xs + factor).min(sw);
                let slot = &mut acc[ox as usize];
                for x in xs..xe {
                    let p = src.get_pixel(x, y).0;
                    slot[0] += p[0] as u64;
                    slot[1] += p[1] as u64;
                    slot[2] += p[2] as u64;
                }
                counts[ox as usize] += (xe - xs) as u64;
            }
        }
        for ox in 0..out_w {
            let n = counts[ox as usize];
            let a = acc[ox as usize];
            let avg = |s: u64| ((2 * s + n) / (2 * n)) as u8;
            out.put_pixel(ox, oy, Rgb([avg(a[0]), avg(a[1]), avg(a[2])]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_blocks_with_half_up_rounding() {
        let mut src = RgbImage::new(2, 1);
        src.put_pixel(0, 0, Rgb([0, 10, 255]));
        src.put_pixel(1, 0, Rgb([1, 11, 254]));
        let out = box_downsample(&src, 0, 0, 1, 1, 2);
        // (0+1)/2 = 0.5 -> 1, (10+11)/2 = 10.5 -> 11, (255+254)/2 = 254.5 -> 255
        assert_eq!(out.get_pixel(0, 0).0, [1, 11, 255]);
    }

    #[test]
    fn clipped_edge_blocks_use_available_pixels() {
        let src = RgbImage::from_fn(3, 3, |x, _| Rgb([if x == 2 { 200 } else { 0 }, 0, 0]));
        let out = box_downsample(&src, 0, 0, 2, 2, 2);
        assert_eq!(out.get_pixel(1, 0).0[0], 200);
        assert_eq!(out.get_pixel(0, 0).0[0], 0);
    }
}
