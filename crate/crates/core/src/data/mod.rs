//! Dataset assembly: ingest COCO-style annotations, carve object-centric
//! crops, composite occluder-on-occludee training pairs, and persist them
//! as inspectable PNGs plus a line-oriented index.
//!
//! Persisted split layout:
//!
//! ```text
//! <out>/index.txt              one `key=value` line per sample
//! <out>/<id>_gt.png            unoccluded target crop (RGB)
//! <out>/<id>_erased.png        gt with occluded pixels zeroed (RGB)
//! <out>/<id>_masks.png         RGBA: R occluded, G visible, B amodal,
//!                              A weighted (0 / 128 / 255)
//! ```

pub mod coco;
pub mod synthetic;

pub use coco::{
    decode_rle, encode_rle, parse_annotations, rasterize_polygon, InstanceRecord, ParseStats,
    Segmentation,
};

use crate::error::{Error, Result};
use crate::mask::{augment, Augment, BinaryMask, CompositeSample, SampleMeta, WeightedMask};
use crate::tensor::{Shape, Tensor};
use crate::train::step_seed;
use image::imageops::FilterType;
use image::{GrayImage, RgbImage, RgbaImage};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

/// One augmentation recipe entry. `CropMargin` crops the frame inward by
/// its margin then nearest-resizes back to the working size, which keeps
/// every mask invariant bit-exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecipeStep {
    HFlip,
    Rot90(u8),
    Shift { dx: i64, dy: i64 },
    CropMargin(usize),
}

impl fmt::Display for RecipeStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecipeStep::HFlip => write!(f, "hflip"),
            RecipeStep::Rot90(k) => write!(f, "rot90:{k}"),
            RecipeStep::Shift { dx, dy } => write!(f, "shift:{dx}:{dy}"),
            RecipeStep::CropMargin(m) => write!(f, "crop:{m}"),
        }
    }
}

/// Parse a comma-separated recipe: `hflip,rot90:2,shift:3:-2,crop:4`.
/// `none` or an empty string is the empty recipe.
pub fn parse_recipe(spec: &str) -> Result<Vec<RecipeStep>> {
    let spec = spec.trim();
    if spec.is_empty() || spec == "none" {
        return Ok(Vec::new());
    }
    let bad = |part: &str| Error::Config(format!("bad augmentation step {part:?}"));
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            let mut bits = part.split(':');
            let head = bits.next().unwrap_or("");
            let args: Vec<&str> = bits.collect();
            match (head, args.as_slice()) {
                ("hflip", []) => Ok(RecipeStep::HFlip),
                ("rot90", [k]) => {
                    let k: u8 = k.parse().map_err(|_| bad(part))?;
                    if (1..=3).contains(&k) {
                        Ok(RecipeStep::Rot90(k))
                    } else {
                        Err(bad(part))
                    }
                }
                ("shift", [dx, dy]) => Ok(RecipeStep::Shift {
                    dx: dx.parse().map_err(|_| bad(part))?,
                    dy: dy.parse().map_err(|_| bad(part))?,
                }),
                ("crop", [m]) => Ok(RecipeStep::CropMargin(m.parse().map_err(|_| bad(part))?)),
                _ => Err(bad(part)),
            }
        })
        .collect()
}

/// A split ready for synthesis: filtered instances plus the augmentation
/// recipe and the seed that makes iteration deterministic.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub split: String,
    pub instances: Vec<InstanceRecord>,
    pub seed: u64,
    pub recipe: Vec<RecipeStep>,
}

impl DatasetManifest {
    /// Keep only instances matching `filter` (category or supercategory),
    /// when given. Instances stay sorted by annotation id.
    pub fn build(
        split: impl Into<String>,
        records: Vec<InstanceRecord>,
        filter: Option<&str>,
        seed: u64,
        recipe: Vec<RecipeStep>,
    ) -> DatasetManifest {
        let instances = match filter {
            Some(f) => records.into_iter().filter(|r| r.matches_filter(f)).collect(),
            None => records,
        };
        DatasetManifest { split: split.into(), instances, seed, recipe }
    }
}

/// Compositor knobs.
#[derive(Clone, Copy, Debug)]
pub struct SynthSettings {
    /// Side of the square object-centric crops.
    pub size: usize,
    /// Accepted range for |occluded| / |target modal|.
    pub ratio_bounds: (f64, f64),
    /// Occluder long side as a fraction of `size`.
    pub scale_range: (f64, f64),
    /// Placement attempts before a target is skipped.
    pub max_tries: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            size: 64,
            ratio_bounds: (0.05, 0.70),
            scale_range: (0.4, 0.9),
            max_tries: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub targets_total: usize,
    pub targets_skipped: usize,
    pub samples_written: usize,
    pub variants_skipped: usize,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "synthesized {} samples from {} targets ({} targets skipped, {} variants skipped)",
            self.samples_written, self.targets_total, self.targets_skipped, self.variants_skipped
        )
    }
}

pub fn tensor_from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::constant(Shape::new(1, 3, h, w), data).expect("u8 pixels are finite")
}

/// [0,1] tensor to 8-bit RGB, clamping and rounding.
pub fn rgb_from_tensor(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Image(format!("expected 1x3xHxW tensor, got {s}")));
    }
    let d = t.data();
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let px = [0, 1, 2].map(|c| {
                (d[(c * s.h + y) * s.w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

fn gray_to_mask(img: &GrayImage) -> BinaryMask {
    BinaryMask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
        img.get_pixel(x as u32, y as u32).0[0] > 127
    })
}

/// An instance with its image loaded and modal mask rasterized.
struct Prepared {
    ann_id: u64,
    image: Arc<RgbImage>,
    mask: BinaryMask,
    /// Inclusive mask bbox (y0, x0, y1, x1) at image resolution.
    bbox: (usize, usize, usize, usize),
}

fn prepare_instances(records: &[InstanceRecord]) -> Result<(Vec<Prepared>, usize)> {
    let mut cache: std::collections::HashMap<u64, Arc<RgbImage>> = std::collections::HashMap::new();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for r in records {
        let image = match cache.get(&r.image_id) {
            Some(img) => img.clone(),
            None => {
                let img = image::open(&r.image_path)
                    .map_err(|e| Error::Image(format!("{}: {e}", r.image_path.display())))?
                    .to_rgb8();
                let img = Arc::new(img);
                cache.insert(r.image_id, img.clone());
                img
            }
        };
        match r.rasterize() {
            Ok(mask) => match mask.bbox() {
                Some(bbox) => out.push(Prepared { ann_id: r.id, image, mask, bbox }),
                None => skipped += 1,
            },
            Err(_) => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Square object-centric crop of `inst`, resized to `size`.
fn target_view(inst: &Prepared, size: usize) -> Option<(Tensor, BinaryMask)> {
    let (ih, iw) = (inst.image.height() as usize, inst.image.width() as usize);
    let (y0, x0, y1, x1) = inst.bbox;
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let side = ((bh.max(bw) as f64 * 1.3).ceil() as usize).clamp(4, ih.min(iw));
    let cy = (y0 + y1) / 2;
    let cx = (x0 + x1) / 2;
    let top = cy.saturating_sub(side / 2).min(ih - side);
    let left = cx.saturating_sub(side / 2).min(iw - side);

    let crop = image::imageops::crop_imm(&*inst.image, left as u32, top as u32, side as u32, side as u32)
        .to_image();
    let img = image::imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
    let mask_crop = image::imageops::crop_imm(
        &mask_to_gray(&inst.mask),
        left as u32,
        top as u32,
        side as u32,
        side as u32,
    )
    .to_image();
    let mask = gray_to_mask(&image::imageops::resize(
        &mask_crop,
        size as u32,
        size as u32,
        FilterType::Nearest,
    ));
    if mask.is_empty_mask() {
        return None;
    }
    Some((tensor_from_rgb(&img), mask))
}

/// Tight crop of an occluder scaled so its long side is `long` pixels.
fn occluder_view(inst: &Prepared, long: usize) -> Option<(Tensor, BinaryMask)> {
    let (y0, x0, y1, x1) = inst.bbox;
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let f = long as f64 / bh.max(bw) as f64;
    let (oh, ow) = (((bh as f64 * f).round() as usize).max(1), ((bw as f64 * f).round() as usize).max(1));
    let crop = image::imageops::crop_imm(&*inst.image, x0 as u32, y0 as u32, bw as u32, bh as u32)
        .to_image();
    let img = image::imageops::resize(&crop, ow as u32, oh as u32, FilterType::Triangle);
    let mask_crop =
        image::imageops::crop_imm(&mask_to_gray(&inst.mask), x0 as u32, y0 as u32, bw as u32, bh as u32)
            .to_image();
    let mask = gray_to_mask(&image::imageops::resize(
        &mask_crop,
        ow as u32,
        oh as u32,
        FilterType::Nearest,
    ));
    if mask.is_empty_mask() {
        return None;
    }
    Some((tensor_from_rgb(&img), mask))
}

/// Nearest-neighbor resize of a whole sample back to `size`; identical
/// index maps for image planes and masks keep every invariant bit-exact.
fn resize_sample_nearest(sample: &CompositeSample, size: usize) -> Result<CompositeSample> {
    let (h, w) = (sample.height(), sample.width());
    let map_y: Vec<usize> = (0..size).map(|y| (y * h) / size).collect();
    let map_x: Vec<usize> = (0..size).map(|x| (x * w) / size).collect();
    let remap_mask = |m: &BinaryMask| {
        BinaryMask::from_fn(size, size, |y, x| m.get(map_y[y], map_x[x]))
    };
    let remap_image = |t: &Tensor| -> Result<Tensor> {
        let s = t.shape();
        let d = t.data();
        let mut out = vec![0.0; s.c * size * size];
        for c in 0..s.c {
            for y in 0..size {
                for x in 0..size {
                    out[(c * size + y) * size + x] = d[(c * h + map_y[y]) * w + map_x[x]];
                }
            }
        }
        drop(d);
        Tensor::constant(Shape::new(1, s.c, size, size), out)
    };
    let occluded = remap_mask(&sample.occluded);
    let visible = remap_mask(&sample.visible);
    let out = CompositeSample {
        gt: remap_image(&sample.gt)?,
        erased: remap_image(&sample.erased)?,
        amodal: crate::mask::amodal_union(&occluded, &visible)?,
        weighted: crate::mask::build_weighted_mask(&occluded, &visible)?,
        occluded,
        visible,
        meta: sample.meta.clone(),
    };
    if out.visible.is_empty_mask() {
        return Err(Error::EmptyMask { op: "resize_sample_nearest" });
    }
    out.validate()?;
    Ok(out)
}

fn apply_recipe_step(sample: &CompositeSample, step: RecipeStep, size: usize) -> Result<CompositeSample> {
    match step {
        RecipeStep::HFlip => augment(sample, Augment::HFlip),
        RecipeStep::Rot90(k) => augment(sample, Augment::Rot90(k)),
        RecipeStep::Shift { dx, dy } => augment(sample, Augment::Shift { dx, dy }),
        RecipeStep::CropMargin(m) => {
            let (h, w) = (sample.height(), sample.width());
            if 2 * m >= h || 2 * m >= w {
                return Err(Error::InvalidArg {
                    op: "apply_recipe_step",
                    detail: format!("crop margin {m} consumes the {h}x{w} frame"),
                });
            }
            let cropped =
                augment(sample, Augment::Crop { y: m, x: m, h: h - 2 * m, w: w - 2 * m })?;
            resize_sample_nearest(&cropped, size)
        }
    }
}

fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(bytes)
}

fn weighted_to_byte(v: f64) -> u8 {
    if v == 0.0 {
        0
    } else if v == 0.5 {
        128
    } else {
        255
    }
}

fn byte_to_weighted(b: u8) -> Result<f64> {
    match b {
        0 => Ok(0.0),
        128 => Ok(0.5),
        255 => Ok(1.0),
        other => Err(Error::Image(format!("weighted mask byte {other} not in {{0,128,255}}"))),
    }
}

/// Pack the four masks into one RGBA image.
fn masks_png(sample: &CompositeSample) -> Result<Vec<u8>> {
    let (h, w) = (sample.height(), sample.width());
    let img = RgbaImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        image::Rgba([
            if sample.occluded.get(y, x) { 255 } else { 0 },
            if sample.visible.get(y, x) { 255 } else { 0 },
            if sample.amodal.get(y, x) { 255 } else { 0 },
            weighted_to_byte(sample.weighted.get(y, x)),
        ])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(bytes)
}

struct EncodedSample {
    target: u64,
    occluder: u64,
    dx: i64,
    dy: i64,
    ratio: f64,
    aug: String,
    gt_png: Vec<u8>,
    erased_png: Vec<u8>,
    masks_png: Vec<u8>,
}

fn encode_sample(sample: &CompositeSample, ratio: f64, aug: &str) -> Result<EncodedSample> {
    Ok(EncodedSample {
        target: sample.meta.target_id,
        occluder: sample.meta.occluder_id,
        dx: sample.meta.dx,
        dy: sample.meta.dy,
        ratio,
        aug: aug.to_string(),
        gt_png: encode_png_rgb(&rgb_from_tensor(&sample.gt)?)?,
        erased_png: encode_png_rgb(&rgb_from_tensor(&sample.erased)?)?,
        masks_png: masks_png(sample)?,
    })
}

/// Composite one target against a pool of occluders, rejection-sampling
/// placement and scale until the occlusion ratio lands in bounds.
fn synthesize_target(
    target: &Prepared,
    pool: &[Prepared],
    self_idx: usize,
    settings: &SynthSettings,
    recipe: &[RecipeStep],
    seed: u64,
) -> Result<(Vec<EncodedSample>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| i != self_idx).collect();
    if candidates.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let Some((gt, modal)) = target_view(target, settings.size) else {
        return Ok((Vec::new(), 0));
    };
    let (ty0, tx0, ty1, tx1) = modal.bbox().expect("nonempty modal mask");

    for _ in 0..settings.max_tries {
        let occ_idx = candidates[rng.random_range(0..candidates.len())];
        let scale = rng.random_range(settings.scale_range.0..=settings.scale_range.1);
        let long = ((settings.size as f64 * scale).round() as usize).max(2);
        let Some((occ_img, occ_mask)) = occluder_view(&pool[occ_idx], long) else {
            continue;
        };
        let (oh, ow) = (occ_mask.height() as i64, occ_mask.width() as i64);
        // Any offset whose bbox intersects the target's bbox.
        let dx = rng.random_range(tx0 as i64 - ow + 1..=tx1 as i64);
        let dy = rng.random_range(ty0 as i64 - oh + 1..=ty1 as i64);
        match crate::mask::compose_occlusion(
            &gt,
            &modal,
            &occ_img,
            &occ_mask,
            (dx, dy),
            settings.ratio_bounds,
        ) {
            Ok(mut sample) => {
                sample.meta = SampleMeta {
                    target_id: target.ann_id,
                    occluder_id: pool[occ_idx].ann_id,
                    dx,
                    dy,
                };
                let ratio = sample.occluded.count() as f64 / modal.count() as f64;
                let mut encoded = vec![encode_sample(&sample, ratio, "none")?];
                let mut variants_skipped = 0usize;
                for step in recipe {
                    match apply_recipe_step(&sample, *step, settings.size) {
                        Ok(aug_sample) => {
                            encoded.push(encode_sample(&aug_sample, ratio, &step.to_string())?)
                        }
                        Err(Error::EmptyMask { .. }) => variants_skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                return Ok((encoded, variants_skipped));
            }
            Err(Error::OcclusionRatio { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((Vec::new(), 0))
}

/// Build and persist every sample of a split. Fully reproducible from the
/// manifest seed; targets are synthesized in parallel with per-target
/// derived seeds and written in manifest order.
pub fn synthesize_split(
    manifest: &DatasetManifest,
    settings: &SynthSettings,
    out_dir: &Path,
) -> Result<SynthSummary> {
    if manifest.instances.is_empty() {
        return Err(Error::Annotations("manifest has no instances".to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (pool, prep_skipped) = prepare_instances(&manifest.instances)?;

    let results: Vec<Result<(Vec<EncodedSample>, usize)>> = pool
        .par_iter()
        .enumerate()
        .map(|(idx, target)| {
            synthesize_target(
                target,
                &pool,
                idx,
                settings,
                &manifest.recipe,
                step_seed(manifest.seed, idx as u64),
            )
        })
        .collect();

    let mut summary = SynthSummary {
        targets_total: manifest.instances.len(),
        targets_skipped: prep_skipped,
        ..SynthSummary::default()
    };
    let index_path = out_dir.join("index.txt");
    let mut index = std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut serial = 0usize;
    for result in results {
        let (encoded, variants_skipped) = result?;
        summary.variants_skipped += variants_skipped;
        if encoded.is_empty() {
            summary.targets_skipped += 1;
            continue;
        }
        for e in encoded {
            let id = format!("{serial:05}");
            for (suffix, bytes) in
                [("gt", &e.gt_png), ("erased", &e.erased_png), ("masks", &e.masks_png)]
            {
                let path = out_dir.join(format!("{id}_{suffix}.png"));
                std::fs::write(&path, bytes).map_err(|err| Error::io(&path, err))?;
            }
            writeln!(
                index,
                "id={id} target={} occluder={} dx={} dy={} ratio={:.6} aug={}",
                e.target, e.occluder, e.dx, e.dy, e.ratio, e.aug
            )
            .map_err(|err| Error::io(&index_path, err))?;
            serial += 1;
            summary.samples_written += 1;
        }
    }
    Ok(summary)
}

/// Reload a persisted split, validating every sample's invariants.
pub fn load_split(dir: &Path) -> Result<Vec<(String, CompositeSample)>> {
    let index_path = dir.join("index.txt");
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: std::collections::HashMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| {
            fields.get(k).copied().ok_or_else(|| {
                Error::Annotations(format!("{}:{}: missing field {k}", index_path.display(), lineno + 1))
            })
        };
        let id = get("id")?.to_string();
        let meta = SampleMeta {
            target_id: get("target")?.parse().unwrap_or(0),
            occluder_id: get("occluder")?.parse().unwrap_or(0),
            dx: get("dx")?.parse().unwrap_or(0),
            dy: get("dy")?.parse().unwrap_or(0),
        };
        let sample = load_sample(dir, &id, meta)?;
        sample.validate()?;
        out.push((id, sample));
    }
    if out.is_empty() {
        return Err(Error::Annotations(format!("{}: empty split", dir.display())));
    }
    Ok(out)
}

fn load_sample(dir: &Path, id: &str, meta: SampleMeta) -> Result<CompositeSample> {
    let open_rgb = |suffix: &str| -> Result<RgbImage> {
        let path = dir.join(format!("{id}_{suffix}.png"));
        Ok(image::open(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8())
    };
    let gt = tensor_from_rgb(&open_rgb("gt")?);
    let erased = tensor_from_rgb(&open_rgb("erased")?);
    let masks_path = dir.join(format!("{id}_masks.png"));
    let masks = image::open(&masks_path)
        .map_err(|e| Error::Image(format!("{}: {e}", masks_path.display())))?
        .to_rgba8();
    let (h, w) = (masks.height() as usize, masks.width() as usize);
    let channel = |c: usize| {
        BinaryMask::from_fn(h, w, |y, x| masks.get_pixel(x as u32, y as u32).0[c] > 127)
    };
    let occluded = channel(0);
    let visible = channel(1);
    let amodal = channel(2);
    let mut weighted = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            weighted[y * w + x] = byte_to_weighted(masks.get_pixel(x as u32, y as u32).0[3])?;
        }
    }
    Ok(CompositeSample {
        gt,
        erased,
        occluded,
        visible,
        amodal,
        weighted: WeightedMask::from_values(h, w, weighted)?,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_corpus;
    use std::path::PathBuf;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("amgc-data-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn recipe_parsing() {
        assert_eq!(parse_recipe("none").unwrap(), vec![]);
        assert_eq!(
            parse_recipe("hflip,rot90:2,shift:3:-2,crop:4").unwrap(),
            vec![
                RecipeStep::HFlip,
                RecipeStep::Rot90(2),
                RecipeStep::Shift { dx: 3, dy: -2 },
                RecipeStep::CropMargin(4),
            ]
        );
        assert!(parse_recipe("rot90:7").is_err());
        assert!(parse_recipe("zoom:2").is_err());
    }

    #[test]
    fn corpus_parse_and_filter() {
        let dir = tmpdir("corpus");
        let corpus = generate_corpus(&dir, 6, 11).unwrap();
        let (records, stats) = parse_annotations(&corpus.annotations, &corpus.images_dir).unwrap();
        assert_eq!(stats.kept, records.len());
        assert!(stats.kept >= 10, "{stats}");
        let animals: Vec<_> = records.iter().filter(|r| r.matches_filter("animal")).collect();
        assert!(!animals.is_empty() && animals.len() < records.len());
        // Filtering is exact.
        let manifest = DatasetManifest::build("t", records.clone(), Some("animal"), 1, vec![]);
        assert!(manifest.instances.iter().all(|r| r.matches_filter("animal")));
        assert_eq!(manifest.instances.len(), animals.len());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn parse_skips_and_counts_bad_records() {
        let dir = tmpdir("badjson");
        std::fs::create_dir_all(dir.join("img")).unwrap();
        // One real image so some records survive.
        image::RgbImage::from_pixel(20, 20, image::Rgb([80, 90, 100]))
            .save(dir.join("img/a.png"))
            .unwrap();
        let doc = serde_json::json!({
            "images": [
                {"id": 1, "file_name": "a.png", "width": 20, "height": 20},
                {"id": 2, "file_name": "missing.png", "width": 20, "height": 20}
            ],
            "categories": [{"id": 1, "name": "cat", "supercategory": "animal"}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 1,
                 "segmentation": [[2.0,2.0, 12.0,2.0, 12.0,12.0, 2.0,12.0]], "bbox": [2,2,10,10]},
                {"id": 11, "image_id": 1, "category_id": 1, "segmentation": []},
                {"id": 12, "image_id": 2, "category_id": 1,
                 "segmentation": [[2.0,2.0, 12.0,2.0, 12.0,12.0, 2.0,12.0]]},
                {"id": 13, "image_id": 1, "category_id": 9,
                 "segmentation": [[2.0,2.0, 12.0,2.0, 12.0,12.0, 2.0,12.0]]},
                {"id": 14, "image_id": 1, "category_id": 1,
                 "segmentation": {"counts": [5, 395], "size": [20, 20]}}
            ]
        });
        let path = dir.join("ann.json");
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        let (records, stats) = parse_annotations(&path, &dir.join("img")).unwrap();
        assert_eq!(stats.total, 5);
        assert_eq!(stats.kept, 2);
        assert_eq!(records.len(), 2);
        assert_eq!(stats.skipped_empty_segmentation, 1);
        assert_eq!(stats.skipped_missing_image_file, 1);
        assert_eq!(stats.skipped_unknown_category, 1);

        std::fs::write(&path, "{ not json").unwrap();
        assert!(parse_annotations(&path, &dir.join("img")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthesize_persist_reload_roundtrip() {
        let dir = tmpdir("synth");
        let corpus = generate_corpus(&dir.join("corpus"), 4, 3).unwrap();
        let (records, _) = parse_annotations(&corpus.annotations, &corpus.images_dir).unwrap();
        let manifest = DatasetManifest::build(
            "train",
            records,
            None,
            21,
            vec![RecipeStep::HFlip, RecipeStep::Rot90(2), RecipeStep::CropMargin(3)],
        );
        let settings = SynthSettings { size: 32, ..SynthSettings::default() };
        let out = dir.join("split");
        let summary = synthesize_split(&manifest, &settings, &out).unwrap();
        assert!(summary.samples_written > 0, "{summary}");
        // Recipe of 3 extra transforms quadruples surviving targets.
        let accepted = summary.samples_written + summary.variants_skipped;
        assert_eq!(accepted % 4, 0, "{summary}");

        let samples = load_split(&out).unwrap();
        assert_eq!(samples.len(), summary.samples_written);
        for (_, s) in &samples {
            assert_eq!(s.height(), 32);
            s.validate().unwrap(); // also run inside load_split; explicit here
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn same_seed_twice_is_byte_identical() {
        let dir = tmpdir("determinism");
        let corpus = generate_corpus(&dir.join("corpus"), 3, 5).unwrap();
        let (records, _) = parse_annotations(&corpus.annotations, &corpus.images_dir).unwrap();
        let settings = SynthSettings { size: 32, ..SynthSettings::default() };
        let mut digests = Vec::new();
        for run in 0..2 {
            let manifest =
                DatasetManifest::build("d", records.clone(), None, 77, vec![RecipeStep::HFlip]);
            let out = dir.join(format!("run{run}"));
            synthesize_split(&manifest, &settings, &out).unwrap();
            let mut files: Vec<_> = std::fs::read_dir(&out)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            let blob: Vec<u8> = files.iter().flat_map(|f| std::fs::read(f).unwrap()).collect();
            digests.push(blob);
        }
        assert_eq!(digests[0], digests[1]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
