//! Per-slice PNGs: image in grey with the ground truth (left) and the
//! prediction (right) tinted by class.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

/// Class colours, background first.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn colour(k: u8) -> [u8; 3] {
    if (k as usize) < PALETTE.len() {
        PALETTE[k as usize]
    } else {
        // Spread any further classes over the hue wheel.
        let h = (k as u32 * 47) % 360;
        let x = (255 * (60 - (h % 120).abs_diff(60)) / 60) as u8;
        match h / 60 {
            0 => [255, x, 0],
            1 => [x, 255, 0],
            2 => [0, 255, x],
            3 => [0, x, 255],
            4 => [x, 0, 255],
            _ => [255, 0, x],
        }
    }
}

fn grey(image: &[f32]) -> Vec<u8> {
    let (lo, hi) = image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    image.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect()
}

/// One `2W × H` RGB image.
pub fn render_slice(image: &[f32], gt: &[u8], pred: &[u8], h: usize, w: usize) -> RgbImage {
    let g = grey(image);
    let mut out = RgbImage::new(2 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (panel, mask) in [gt, pred].iter().enumerate() {
                let base = [g[i]; 3];
                let px = if mask[i] == 0 {
                    base
                } else {
                    let c = colour(mask[i]);
                    [0, 1, 2].map(|j| ((base[j] as u16 * 2 + c[j] as u16 * 3) / 5) as u8)
                };
                out.put_pixel((panel * w + x) as u32, y as u32, Rgb(px));
            }
        }
    }
    out
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_stays_grey_and_classes_are_tinted() {
        let img = render_slice(&[0.0, 1.0], &[0, 1], &[0, 0], 1, 2);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_ne!(img.get_pixel(1, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(3, 0).0, [255, 255, 255]);
        assert_ne!(colour(20), colour(21));
    }
}
