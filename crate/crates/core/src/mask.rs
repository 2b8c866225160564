//! Mask algebra: modal, amodal, occlusion, and weighted masks, plus
//! self-supervised composition of occluder-on-occludee training pairs.
//!
//! The weighted mask is the three-level validity map fed to the network:
//! 0 on invisible (occluded) pixels, 1 on the visible part of the target
//! object, 0.5 everywhere else.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-pixel {0,1} mask with image extents.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask { h, w, bits: vec![0; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape {
                op: "BinaryMask::from_bits",
                detail: format!("{}x{} needs {} bits, got {}", h, w, h * w, bits.len()),
            });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArg {
                op: "BinaryMask::from_bits",
                detail: "values outside {0,1}".to_string(),
            });
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    bits[y * w + x] = 1;
                }
            }
        }
        BinaryMask { h, w, bits }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    fn same_extents(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape {
                op,
                detail: format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w),
            });
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_extents(other, "BinaryMask::and")?;
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_extents(other, "BinaryMask::and_not")?;
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a & (1 - b)).collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_extents(other, "BinaryMask::or")?;
        Ok(BinaryMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn intersects(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| a & b == 1)
    }

    /// Translate by (dx, dy) in (columns, rows), clipping at the frame.
    pub fn shifted(&self, dx: i64, dy: i64) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.h, self.w);
        for y in 0..self.h {
            let ty = y as i64 + dy;
            if ty < 0 || ty >= self.h as i64 {
                continue;
            }
            for x in 0..self.w {
                if self.bits[y * self.w + x] == 0 {
                    continue;
                }
                let tx = x as i64 + dx;
                if tx < 0 || tx >= self.w as i64 {
                    continue;
                }
                out.bits[ty as usize * self.w + tx as usize] = 1;
            }
        }
        out
    }

    /// Tight bounding box as (y0, x0, y1, x1), inclusive, or None if empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.bits[y * self.w + x] == 1 {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }
}

/// The three-level validity map over {0, 0.5, 1}.
#[derive(Clone, PartialEq, Debug)]
pub struct WeightedMask {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl WeightedMask {
    pub fn from_values(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape {
                op: "WeightedMask::from_values",
                detail: format!("{}x{} needs {} values, got {}", h, w, h * w, values.len()),
            });
        }
        if values.iter().any(|&v| v != 0.0 && v != 0.5 && v != 1.0) {
            return Err(Error::InvalidArg {
                op: "WeightedMask::from_values",
                detail: "values outside {0, 0.5, 1}".to_string(),
            });
        }
        Ok(WeightedMask { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The region this mask marks invalid (value 0).
    pub fn hole(&self) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, |y, x| self.get(y, x) == 0.0)
    }

    /// As a 1×1×h×w tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(Shape::new(1, 1, self.h, self.w), self.values.clone())
            .expect("weighted mask values are finite")
    }

    /// Stack several masks of equal extents into an n×1×h×w tensor.
    pub fn batch_tensor(masks: &[&WeightedMask]) -> Result<Tensor> {
        let (h, w) = (masks[0].h, masks[0].w);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.h != h || m.w != w {
                return Err(Error::Shape {
                    op: "WeightedMask::batch_tensor",
                    detail: "mixed extents".to_string(),
                });
            }
            data.extend_from_slice(&m.values);
        }
        Tensor::constant(Shape::new(masks.len(), 1, h, w), data)
    }
}

/// Piecewise weighted-mask construction: 0 on the occluded region, 1 on the
/// visible object region, 0.5 otherwise. Inputs must be disjoint.
pub fn build_weighted_mask(occ: &BinaryMask, vis: &BinaryMask) -> Result<WeightedMask> {
    occ.same_extents(vis, "build_weighted_mask")?;
    if occ.intersects(vis) {
        return Err(Error::InvalidArg {
            op: "build_weighted_mask",
            detail: "occluded and visible masks overlap".to_string(),
        });
    }
    let values = occ
        .bits
        .iter()
        .zip(&vis.bits)
        .map(|(&o, &v)| {
            if o == 1 {
                0.0
            } else if v == 1 {
                1.0
            } else {
                0.5
            }
        })
        .collect();
    Ok(WeightedMask { h: occ.h, w: occ.w, values })
}

/// Amodal mask as the union of the occluded region and the visible region.
pub fn amodal_union(occ: &BinaryMask, vis: &BinaryMask) -> Result<BinaryMask> {
    occ.same_extents(vis, "amodal_union")?;
    occ.or(vis)
}

/// Provenance of a composite sample.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct SampleMeta {
    pub target_id: u64,
    pub occluder_id: u64,
    pub dx: i64,
    pub dy: i64,
}

/// One self-supervised training pair: the unoccluded target crop, its
/// erased version, and the four masks describing the synthetic occlusion.
#[derive(Clone, Debug)]
pub struct CompositeSample {
    /// Ground-truth crop, (1, c, h, w), values in [0, 1].
    pub gt: Tensor,
    /// `gt` with occluded pixels zeroed.
    pub erased: Tensor,
    /// Occluded region of the target, M_{X∩Y}.
    pub occluded: BinaryMask,
    /// Visible region of the target, M_{X\Y}.
    pub visible: BinaryMask,
    /// Union of the two.
    pub amodal: BinaryMask,
    pub weighted: WeightedMask,
    pub meta: SampleMeta,
}

impl CompositeSample {
    pub fn height(&self) -> usize {
        self.gt.shape().h
    }

    pub fn width(&self) -> usize {
        self.gt.shape().w
    }

    /// Check every structural invariant. Cheap enough to run on reload.
    pub fn validate(&self) -> Result<()> {
        let s = self.gt.shape();
        let (h, w) = (s.h, s.w);
        let fail = |detail: String| Error::InvalidArg { op: "CompositeSample::validate", detail };
        if self.erased.shape() != s {
            return Err(fail("gt/erased shape mismatch".to_string()));
        }
        for (name, mh, mw) in [
            ("occluded", self.occluded.h, self.occluded.w),
            ("visible", self.visible.h, self.visible.w),
            ("amodal", self.amodal.h, self.amodal.w),
            ("weighted", self.weighted.h, self.weighted.w),
        ] {
            if (mh, mw) != (h, w) {
                return Err(fail(format!("{name} mask extents {mh}x{mw} vs image {h}x{w}")));
            }
        }
        if self.occluded.intersects(&self.visible) {
            return Err(fail("occluded and visible overlap".to_string()));
        }
        let union = self.occluded.or(&self.visible)?;
        if union != self.amodal {
            return Err(fail("amodal != occluded ∪ visible".to_string()));
        }
        for y in 0..h {
            for x in 0..w {
                let expect = if self.occluded.get(y, x) {
                    0.0
                } else if self.visible.get(y, x) {
                    1.0
                } else {
                    0.5
                };
                if self.weighted.get(y, x) != expect {
                    return Err(fail(format!("weighted mask wrong at ({y},{x})")));
                }
            }
        }
        let gt = self.gt.data();
        let er = self.erased.data();
        for c in 0..s.c {
            for y in 0..h {
                for x in 0..w {
                    let i = s.idx(0, c, y, x);
                    if self.occluded.get(y, x) {
                        if er[i] != 0.0 {
                            return Err(fail(format!("erased not zero in hole at ({y},{x})")));
                        }
                    } else if er[i] != gt[i] {
                        return Err(fail(format!("erased differs from gt off-hole at ({y},{x})")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Paste an occluder's modal mask over a target at `placement` and derive
/// the training pair. The occluder's appearance never enters the sample;
/// the mask alone defines what becomes invisible.
///
/// Fails with [`Error::OcclusionRatio`] when |M_{X∩Y}|/|M_X| falls outside
/// `occlusion_bounds`; callers treat that as a resample signal.
pub fn compose_occlusion(
    target_image: &Tensor,
    target_mask: &BinaryMask,
    occluder_image: &Tensor,
    occluder_mask: &BinaryMask,
    placement: (i64, i64),
    occlusion_bounds: (f64, f64),
) -> Result<CompositeSample> {
    let s = target_image.shape();
    if s.n != 1 {
        return Err(Error::InvalidArg {
            op: "compose_occlusion",
            detail: "target image must be a single sample".to_string(),
        });
    }
    if (target_mask.h, target_mask.w) != (s.h, s.w) {
        return Err(Error::Shape {
            op: "compose_occlusion",
            detail: "target mask extents differ from target image".to_string(),
        });
    }
    let os = occluder_image.shape();
    if (occluder_mask.h, occluder_mask.w) != (os.h, os.w) {
        return Err(Error::Shape {
            op: "compose_occlusion",
            detail: "occluder mask extents differ from occluder image".to_string(),
        });
    }
    if target_mask.is_empty_mask() || occluder_mask.is_empty_mask() {
        return Err(Error::EmptyMask { op: "compose_occlusion" });
    }

    let (dx, dy) = placement;
    // Occluder mask re-gridded onto the target frame at the placement.
    let mut shifted = BinaryMask::zeros(s.h, s.w);
    for y in 0..occluder_mask.h {
        let ty = y as i64 + dy;
        if ty < 0 || ty >= s.h as i64 {
            continue;
        }
        for x in 0..occluder_mask.w {
            if !occluder_mask.get(y, x) {
                continue;
            }
            let tx = x as i64 + dx;
            if tx < 0 || tx >= s.w as i64 {
                continue;
            }
            shifted.set(ty as usize, tx as usize, true);
        }
    }

    let occluded = target_mask.and(&shifted)?;
    let ratio = occluded.count() as f64 / target_mask.count() as f64;
    let (min_ratio, max_ratio) = occlusion_bounds;
    if ratio < min_ratio || ratio > max_ratio {
        return Err(Error::OcclusionRatio { ratio, min: min_ratio, max: max_ratio });
    }
    let visible = target_mask.and_not(&shifted)?;
    let amodal = amodal_union(&occluded, &visible)?;
    let weighted = build_weighted_mask(&occluded, &visible)?;

    let mut erased = target_image.to_vec();
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                if occluded.get(y, x) {
                    erased[s.idx(0, c, y, x)] = 0.0;
                }
            }
        }
    }
    Ok(CompositeSample {
        gt: target_image.detach(),
        erased: Tensor::constant(s, erased)?,
        occluded,
        visible,
        amodal,
        weighted,
        meta: SampleMeta { dx, dy, ..SampleMeta::default() },
    })
}

/// Spatial transforms applied identically to a sample's image and masks.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Augment {
    HFlip,
    /// Quarter turns counter-clockwise, k ∈ 1..=3.
    Rot90(u8),
    /// Crop to the box (y, x, h, w).
    Crop { y: usize, x: usize, h: usize, w: usize },
    /// Translate content by (dx, dy); vacated pixels read 0 (masks),
    /// black (images), 0.5 (weighted).
    Shift { dx: i64, dy: i64 },
}

fn transform_grid<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    t: Augment,
    fill: T,
) -> (Vec<T>, usize, usize) {
    match t {
        Augment::HFlip => {
            let mut out = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    out.push(src[y * w + (w - 1 - x)]);
                }
            }
            (out, h, w)
        }
        Augment::Rot90(k) => {
            let k = k % 4;
            if k == 0 {
                return (src.to_vec(), h, w);
            }
            let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
            let mut out = vec![fill; oh * ow];
            for y in 0..h {
                for x in 0..w {
                    // CCW quarter turn: (y, x) → (w-1-x, y), iterated k times.
                    let (mut cy, mut cx, mut ch, mut cw) = (y, x, h, w);
                    for _ in 0..k {
                        let (ny, nx) = (cw - 1 - cx, cy);
                        cy = ny;
                        cx = nx;
                        std::mem::swap(&mut ch, &mut cw);
                    }
                    let _ = ch;
                    out[cy * cw + cx] = src[y * w + x];
                }
            }
            (out, oh, ow)
        }
        Augment::Crop { y, x, h: ch, w: cw } => {
            let mut out = Vec::with_capacity(ch * cw);
            for yy in y..y + ch {
                for xx in x..x + cw {
                    out.push(src[yy * w + xx]);
                }
            }
            (out, ch, cw)
        }
        Augment::Shift { dx, dy } => {
            let mut out = vec![fill; h * w];
            for y in 0..h {
                let ty = y as i64 + dy;
                if ty < 0 || ty >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let tx = x as i64 + dx;
                    if tx < 0 || tx >= w as i64 {
                        continue;
                    }
                    out[ty as usize * w + tx as usize] = src[y * w + x];
                }
            }
            (out, h, w)
        }
    }
}

fn transform_binary(m: &BinaryMask, t: Augment) -> BinaryMask {
    let (bits, h, w) = transform_grid(&m.bits, m.h, m.w, t, 0u8);
    BinaryMask { h, w, bits }
}

fn transform_weighted(m: &WeightedMask, t: Augment) -> WeightedMask {
    let (values, h, w) = transform_grid(&m.values, m.h, m.w, t, 0.5);
    WeightedMask { h, w, values }
}

fn transform_image(img: &Tensor, t: Augment) -> Result<Tensor> {
    let s = img.shape();
    let data = img.data();
    let mut out: Vec<f64> = Vec::new();
    let (mut oh, mut ow) = (0, 0);
    for c in 0..s.c {
        let plane = &data[s.idx(0, c, 0, 0)..s.idx(0, c, 0, 0) + s.h * s.w];
        let (p, h, w) = transform_grid(plane, s.h, s.w, t, 0.0);
        out.extend_from_slice(&p);
        oh = h;
        ow = w;
    }
    drop(data);
    Tensor::constant(Shape::new(1, s.c, oh, ow), out)
}

/// Apply one transform to a sample, image and all four masks together.
/// Errors if the crop box leaves the frame or the transform evicts the
/// entire visible region.
pub fn augment(sample: &CompositeSample, transform: Augment) -> Result<CompositeSample> {
    let (h, w) = (sample.height(), sample.width());
    if let Augment::Crop { y, x, h: ch, w: cw } = transform {
        if ch == 0 || cw == 0 || y + ch > h || x + cw > w {
            return Err(Error::InvalidArg {
                op: "augment",
                detail: format!("crop box ({y},{x},{ch},{cw}) outside {h}x{w} frame"),
            });
        }
    }
    let out = CompositeSample {
        gt: transform_image(&sample.gt, transform)?,
        erased: transform_image(&sample.erased, transform)?,
        occluded: transform_binary(&sample.occluded, transform),
        visible: transform_binary(&sample.visible, transform),
        amodal: transform_binary(&sample.amodal, transform),
        weighted: transform_weighted(&sample.weighted, transform),
        meta: sample.meta.clone(),
    };
    if out.visible.is_empty_mask() {
        return Err(Error::EmptyMask { op: "augment" });
    }
    out.validate()?;
    Ok(out)
}
