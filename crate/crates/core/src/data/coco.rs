//! COCO-style annotation ingestion: JSON documents with images /
//! annotations / categories arrays, polygon rasterization with pixel-center
//! sampling, and the column-major run-length mask convention.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use serde::Deserialize;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Deserialize)]
struct CocoDoc {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    segmentation: Option<SegmentationJson>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SegmentationJson {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Raw(Vec<u32>),
    // LEB128-style compressed strings are recognized but not supported.
    #[allow(dead_code)]
    Compressed(String),
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    supercategory: String,
}

/// Instance segmentation in our own terms.
#[derive(Clone, Debug, PartialEq)]
pub enum Segmentation {
    /// Rings of (x, y) vertices; the instance is their union.
    Polygons(Vec<Vec<(f64, f64)>>),
    /// Column-major alternating run lengths, zeros first.
    Rle(Vec<u32>),
}

/// One validated instance from the annotation document.
#[derive(Clone, Debug)]
pub struct InstanceRecord {
    pub id: u64,
    pub image_id: u64,
    pub image_path: PathBuf,
    pub image_width: usize,
    pub image_height: usize,
    pub category: String,
    pub supercategory: String,
    pub segmentation: Segmentation,
    /// (x, y, w, h) in pixels.
    pub bbox: [f64; 4],
}

impl InstanceRecord {
    /// Rasterize the modal mask at image resolution.
    pub fn rasterize(&self) -> Result<BinaryMask> {
        let (h, w) = (self.image_height, self.image_width);
        match &self.segmentation {
            Segmentation::Polygons(rings) => {
                let mut acc = BinaryMask::zeros(h, w);
                for ring in rings {
                    let m = rasterize_polygon(ring, h, w)?;
                    acc = acc.or(&m)?;
                }
                if acc.is_empty_mask() {
                    return Err(Error::EmptyMask { op: "InstanceRecord::rasterize" });
                }
                Ok(acc)
            }
            Segmentation::Rle(counts) => decode_rle(counts, h, w),
        }
    }

    /// True when `filter` equals the category or supercategory name
    /// (case-insensitive).
    pub fn matches_filter(&self, filter: &str) -> bool {
        self.category.eq_ignore_ascii_case(filter) || self.supercategory.eq_ignore_ascii_case(filter)
    }
}

/// Skip counters from one parse pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub total: usize,
    pub kept: usize,
    pub skipped_empty_segmentation: usize,
    pub skipped_compressed_rle: usize,
    pub skipped_bad_rle: usize,
    pub skipped_unknown_category: usize,
    pub skipped_unknown_image: usize,
    pub skipped_missing_image_file: usize,
}

impl fmt::Display for ParseStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kept {}/{} (skipped: {} empty segmentation, {} compressed rle, {} bad rle, {} unknown category, {} unknown image, {} missing file)",
            self.kept,
            self.total,
            self.skipped_empty_segmentation,
            self.skipped_compressed_rle,
            self.skipped_bad_rle,
            self.skipped_unknown_category,
            self.skipped_unknown_image,
            self.skipped_missing_image_file,
        )
    }
}

/// Parse an annotation document, validating each record and counting the
/// ones dropped. Image files are resolved against `images_dir`; records
/// whose file is missing are skipped, not fatal.
pub fn parse_annotations(path: &Path, images_dir: &Path) -> Result<(Vec<InstanceRecord>, ParseStats)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: CocoDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Annotations(format!("{}: {e}", path.display())))?;

    let categories: HashMap<u64, (String, String)> = doc
        .categories
        .into_iter()
        .map(|c| (c.id, (c.name, c.supercategory)))
        .collect();
    let images: HashMap<u64, (String, usize, usize)> = doc
        .images
        .into_iter()
        .map(|i| (i.id, (i.file_name, i.width, i.height)))
        .collect();

    let mut stats = ParseStats::default();
    let mut records = Vec::new();
    for ann in doc.annotations {
        stats.total += 1;
        let Some((file_name, width, height)) = images.get(&ann.image_id) else {
            stats.skipped_unknown_image += 1;
            continue;
        };
        let Some((category, supercategory)) = categories.get(&ann.category_id) else {
            stats.skipped_unknown_category += 1;
            continue;
        };
        let segmentation = match ann.segmentation {
            None => {
                stats.skipped_empty_segmentation += 1;
                continue;
            }
            Some(SegmentationJson::Polygons(polys)) => {
                let rings: Vec<Vec<(f64, f64)>> = polys
                    .iter()
                    .filter(|p| p.len() >= 6 && p.len() % 2 == 0)
                    .map(|p| p.chunks_exact(2).map(|c| (c[0], c[1])).collect())
                    .collect();
                if rings.is_empty() {
                    stats.skipped_empty_segmentation += 1;
                    continue;
                }
                Segmentation::Polygons(rings)
            }
            Some(SegmentationJson::Rle { counts, size }) => match counts {
                RleCounts::Compressed(_) => {
                    stats.skipped_compressed_rle += 1;
                    continue;
                }
                RleCounts::Raw(counts) => {
                    let sum: u64 = counts.iter().map(|&c| c as u64).sum();
                    if size != [*height, *width] || sum != (*height * *width) as u64 {
                        stats.skipped_bad_rle += 1;
                        continue;
                    }
                    Segmentation::Rle(counts)
                }
            },
        };
        let image_path = images_dir.join(file_name);
        if !image_path.is_file() {
            stats.skipped_missing_image_file += 1;
            continue;
        }
        let bbox = ann.bbox.unwrap_or_else(|| bbox_of(&segmentation, *height, *width));
        records.push(InstanceRecord {
            id: ann.id,
            image_id: ann.image_id,
            image_path,
            image_width: *width,
            image_height: *height,
            category: category.clone(),
            supercategory: supercategory.clone(),
            segmentation,
            bbox,
        });
        stats.kept += 1;
    }
    records.sort_by_key(|r| r.id);
    Ok((records, stats))
}

fn bbox_of(seg: &Segmentation, h: usize, w: usize) -> [f64; 4] {
    match seg {
        Segmentation::Polygons(rings) => {
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for ring in rings {
                for &(x, y) in ring {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
            [x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0)]
        }
        Segmentation::Rle(_) => [0.0, 0.0, w as f64, h as f64],
    }
}

/// Even-odd polygon fill sampled at pixel centers (x+0.5, y+0.5).
pub fn rasterize_polygon(points: &[(f64, f64)], h: usize, w: usize) -> Result<BinaryMask> {
    if points.len() < 3 {
        return Err(Error::InvalidArg {
            op: "rasterize_polygon",
            detail: format!("need at least 3 vertices, got {}", points.len()),
        });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let n = points.len();
    let mut crossings: Vec<f64> = Vec::with_capacity(8);
    for row in 0..h {
        let cy = row as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x1, y1) = points[i];
            let (x2, y2) = points[(i + 1) % n];
            // Half-open vertical span so shared vertices count once.
            if (y1 <= cy) != (y2 <= cy) {
                crossings.push(x1 + (cy - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            // Pixel centers in [x0, x1).
            let start = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let end = (pair[1] - 0.5).ceil().min(w as f64) as i64;
            for x in start..end {
                mask.set(row, x as usize, true);
            }
        }
    }
    if mask.is_empty_mask() {
        return Err(Error::EmptyMask { op: "rasterize_polygon" });
    }
    Ok(mask)
}

/// Decode column-major alternating runs starting with zeros.
pub fn decode_rle(counts: &[u32], h: usize, w: usize) -> Result<BinaryMask> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::InvalidArg {
            op: "decode_rle",
            detail: format!("counts sum {total} != {h}x{w}"),
        });
    }
    let mut mask = BinaryMask::zeros(h, w);
    let mut idx = 0usize;
    let mut value = false;
    for &run in counts {
        if value {
            for i in idx..idx + run as usize {
                // Column-major: linear index i maps to (row i % h, col i / h).
                mask.set(i % h, i / h, true);
            }
        }
        idx += run as usize;
        value = !value;
    }
    Ok(mask)
}

/// Inverse of [`decode_rle`]; the first run counts leading zeros and may
/// be 0.
pub fn encode_rle(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for col in 0..w {
        for row in 0..h {
            let v = mask.get(row, col);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_polygon_covers_pixel_centers() {
        // Square [1,3)×[1,3): covers the 4 pixel centers of a 2×2 region.
        let pts = vec![(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)];
        let m = rasterize_polygon(&pts, 4, 4).unwrap();
        assert_eq!(m.count(), 4);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert!(m.get(y, x));
        }
    }

    #[test]
    fn out_of_frame_triangle_is_empty_error() {
        let pts = vec![(10.0, 10.0), (12.0, 10.0), (11.0, 12.0)];
        assert!(matches!(rasterize_polygon(&pts, 4, 4), Err(Error::EmptyMask { .. })));
        assert!(rasterize_polygon(&[(0.0, 0.0), (1.0, 1.0)], 4, 4).is_err());
    }

    #[test]
    fn l_shape_matches_point_in_polygon_brute_force() {
        let pts = vec![
            (0.5, 0.5),
            (6.5, 0.5),
            (6.5, 3.5),
            (3.5, 3.5),
            (3.5, 6.5),
            (0.5, 6.5),
        ];
        let m = rasterize_polygon(&pts, 8, 8).unwrap();
        // Even-odd ray cast per pixel center, written independently.
        let inside = |px: f64, py: f64| {
            let mut odd = false;
            for i in 0..pts.len() {
                let (x1, y1) = pts[i];
                let (x2, y2) = pts[(i + 1) % pts.len()];
                if (y1 <= py) != (y2 <= py) {
                    let x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1);
                    if px < x_cross {
                        odd = !odd;
                    }
                }
            }
            odd
        };
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(
                    m.get(y, x),
                    inside(x as f64 + 0.5, y as f64 + 0.5),
                    "disagreement at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn rle_decode_manual_case() {
        // [2,2] on 2×2: first column zeros, second column ones.
        let m = decode_rle(&[2, 2], 2, 2).unwrap();
        assert!(!m.get(0, 0) && !m.get(1, 0));
        assert!(m.get(0, 1) && m.get(1, 1));
    }

    #[test]
    fn rle_all_zeros_and_sum_mismatch() {
        let m = decode_rle(&[9], 3, 3).unwrap();
        assert!(m.is_empty_mask());
        assert!(decode_rle(&[4, 2], 3, 3).is_err());
    }

    #[test]
    fn rle_roundtrip_random_masks() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let bits: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.4) as u8).collect();
            let m = BinaryMask::from_bits(h, w, bits).unwrap();
            let counts = encode_rle(&m);
            let back = decode_rle(&counts, h, w).unwrap();
            assert_eq!(back, m);
        }
    }
}
