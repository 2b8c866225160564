//! Side-by-side comparison panels: gt | weighted mask | masked input |
//! completed output, one row per sample.

use amgc::data::rgb_from_tensor;
use amgc::mask::WeightedMask;
use amgc::{Result, Tensor};
use image::RgbImage;

const GAP: u32 = 2;

fn weighted_as_rgb(mask: &WeightedMask) -> RgbImage {
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let v = (mask.get(y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([v, v, v])
    })
}

/// Compose one panel row from [0,1] tensors and the weighted mask.
pub fn sample_panel(gt: &Tensor, weighted: &WeightedMask, erased: &Tensor, output: &Tensor) -> Result<RgbImage> {
    let tiles = [
        rgb_from_tensor(gt)?,
        weighted_as_rgb(weighted),
        rgb_from_tensor(erased)?,
        rgb_from_tensor(output)?,
    ];
    let h = tiles[0].height();
    let w = tiles[0].width();
    let total_w = w * 4 + GAP * 3;
    let mut panel = RgbImage::from_pixel(total_w, h, image::Rgb([255, 255, 255]));
    for (i, tile) in tiles.iter().enumerate() {
        let x0 = i as u32 * (w + GAP);
        image::imageops::overlay(&mut panel, tile, x0 as i64, 0);
    }
    Ok(panel)
}
