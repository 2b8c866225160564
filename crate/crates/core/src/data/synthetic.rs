//! Self-contained demo corpus: textured shape instances with COCO-style
//! annotations, so the whole pipeline runs without any external dataset.
//!
//! Each image holds two opaque shapes on a gradient background. Shape
//! outlines go into the annotation document as polygons (every fifth
//! instance as uncompressed column-major RLE instead), and pixels are
//! painted from the exact same rasterization, so annotations and imagery
//! agree precisely.

use crate::data::coco::{encode_rle, rasterize_polygon};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::{Path, PathBuf};

pub const IMAGE_W: usize = 128;
pub const IMAGE_H: usize = 96;

/// Category table: two animal classes and two object classes so the
/// `--filter animal` path has something to separate.
const CATEGORIES: [(u64, &str, &str); 4] = [
    (1, "cat", "animal"),
    (2, "dog", "animal"),
    (3, "carton", "object"),
    (4, "disk", "object"),
];

pub struct SyntheticCorpus {
    pub annotations: PathBuf,
    pub images_dir: PathBuf,
    pub instances: usize,
}

fn shape_polygon(rng: &mut ChaCha8Rng, category: u64, cx: f64, cy: f64, r: f64) -> Vec<(f64, f64)> {
    match category {
        // cat: irregular blob (8-gon with jittered radii)
        1 => (0..8)
            .map(|i| {
                let a = i as f64 / 8.0 * std::f64::consts::TAU;
                let rr = r * rng.random_range(0.6..1.0);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect(),
        // dog: triangle
        2 => vec![(cx, cy - r), (cx + 0.9 * r, cy + 0.8 * r), (cx - 0.9 * r, cy + 0.8 * r)],
        // carton: axis-aligned rectangle
        3 => vec![
            (cx - r, cy - 0.7 * r),
            (cx + r, cy - 0.7 * r),
            (cx + r, cy + 0.7 * r),
            (cx - r, cy + 0.7 * r),
        ],
        // disk: 16-gon ellipse
        _ => (0..16)
            .map(|i| {
                let a = i as f64 / 16.0 * std::f64::consts::TAU;
                (cx + r * a.cos(), cy + 0.75 * r * a.sin())
            })
            .collect(),
    }
}

fn paint_texture(category: u64, base: [f64; 3], y: usize, x: usize) -> [u8; 3] {
    // Per-category texture so style/perceptual terms have detail to learn.
    let t = match category {
        1 => if (x / 3 + y / 3) % 2 == 0 { 0.18 } else { -0.12 },
        2 => if x % 5 < 2 { 0.2 } else { -0.1 },
        3 => if y % 4 < 2 { 0.15 } else { -0.15 },
        _ => 0.25 * ((x as f64 * 0.7).sin() * (y as f64 * 0.5).cos()),
    };
    [0, 1, 2].map(|c| ((base[c] + t).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Generate `n_images` images with two instances each, plus
/// `annotations.json`, under `dir`. Deterministic in `seed`.
pub fn generate_corpus(dir: &Path, n_images: usize, seed: u64) -> Result<SyntheticCorpus> {
    if n_images == 0 {
        return Err(Error::InvalidArg {
            op: "generate_corpus",
            detail: "need at least one image".to_string(),
        });
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut images_json = Vec::new();
    let mut annotations_json = Vec::new();
    let mut ann_id: u64 = 0;

    for img_idx in 0..n_images {
        let file_name = format!("img_{img_idx:03}.png");
        let mut img = image::RgbImage::from_fn(IMAGE_W as u32, IMAGE_H as u32, |x, y| {
            let g = 40.0 + 120.0 * (x as f64 / IMAGE_W as f64);
            let b = 60.0 + 100.0 * (y as f64 / IMAGE_H as f64);
            image::Rgb([g as u8 / 2 + 30, g as u8, b as u8])
        });

        for slot in 0..2 {
            ann_id += 1;
            let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())].0;
            let r = rng.random_range(14.0..24.0);
            let cx = rng.random_range(r + 2.0..IMAGE_W as f64 - r - 2.0);
            let cy = rng.random_range(r + 2.0..IMAGE_H as f64 - r - 2.0);
            let poly = shape_polygon(&mut rng, category, cx, cy, r);
            let mask = rasterize_polygon(&poly, IMAGE_H, IMAGE_W)?;
            let base = [
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
                rng.random_range(0.2..0.9),
            ];
            for y in 0..IMAGE_H {
                for x in 0..IMAGE_W {
                    if mask.get(y, x) {
                        img.put_pixel(x as u32, y as u32, image::Rgb(paint_texture(category, base, y, x)));
                    }
                }
            }
            let (y0, x0, y1, x1) = mask.bbox().expect("rasterize_polygon rejects empty");
            let bbox = json!([x0, y0, x1 - x0 + 1, y1 - y0 + 1]);
            // Every fifth instance exercises the RLE path.
            let segmentation = if ann_id % 5 == 0 {
                json!({ "counts": encode_rle(&mask), "size": [IMAGE_H, IMAGE_W] })
            } else {
                let flat: Vec<f64> = poly.iter().flat_map(|&(x, y)| [x, y]).collect();
                json!([flat])
            };
            annotations_json.push(json!({
                "id": ann_id,
                "image_id": img_idx as u64 + 1,
                "category_id": category,
                "segmentation": segmentation,
                "bbox": bbox,
                "area": mask.count(),
                "iscrowd": 0,
            }));
            let _ = slot;
        }

        let path = images_dir.join(&file_name);
        img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        images_json.push(json!({
            "id": img_idx as u64 + 1,
            "file_name": file_name,
            "width": IMAGE_W,
            "height": IMAGE_H,
        }));
    }

    let doc = json!({
        "images": images_json,
        "annotations": annotations_json,
        "categories": CATEGORIES
            .iter()
            .map(|(id, name, sup)| json!({"id": id, "name": name, "supercategory": sup}))
            .collect::<Vec<_>>(),
    });
    let annotations = dir.join("annotations.json");
    std::fs::write(&annotations, serde_json::to_vec_pretty(&doc).unwrap())
        .map_err(|e| Error::io(&annotations, e))?;
    Ok(SyntheticCorpus { annotations, images_dir, instances: ann_id as usize })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let base = std::env::temp_dir().join(format!("amgc-synthcorpus-{}", std::process::id()));
        let mut blobs = Vec::new();
        for run in 0..2 {
            let dir = base.join(format!("r{run}"));
            let corpus = generate_corpus(&dir, 2, 9).unwrap();
            assert_eq!(corpus.instances, 4);
            let mut files: Vec<_> = std::fs::read_dir(&corpus.images_dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            let mut blob = std::fs::read(&corpus.annotations).unwrap();
            for f in files {
                blob.extend(std::fs::read(f).unwrap());
            }
            blobs.push(blob);
        }
        assert_eq!(blobs[0], blobs[1]);
        std::fs::remove_dir_all(&base).ok();
    }
}
