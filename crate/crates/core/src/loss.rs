//! The five training objectives and their weighted combination, plus the
//! frozen feature backbone standing in for pretrained perceptual taps.
//!
//! All reductions are means (per element, or per hole pixel for the patch
//! term), so the default weight factors stay on one scale regardless of
//! resolution.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{
    abs, activation, add, affine, avg_down2, conv2d, gram, mean_all, mul, sub, ActKind, Shape,
    Tensor,
};
use crate::train::checkpoint::{Checkpoint, Record};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Weight factors for the five loss terms, in the order adversarial,
/// perceptual, patch, style, reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub perceptual: f64,
    pub patch: f64,
    pub style: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            perceptual: 100.0,
            patch: 10.0,
            style: 1.0,
            reconstruction: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.adversarial,
            self.perceptual,
            self.patch,
            self.style,
            self.reconstruction,
        ];
        if all.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".to_string()));
        }
        Ok(())
    }
}

fn relu(x: &Tensor) -> Result<Tensor> {
    activation(ActKind::Relu, x)
}

fn check_scores(op: &'static str, scores: &Tensor) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArg { op, detail: "empty score map".to_string() });
    }
    Ok(())
}

/// Discriminator hinge objective (the minimized form):
/// mean(relu(1 − D(x))) + mean(relu(1 + D(G(z)))).
pub fn hinge_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_scores("hinge_d", real_scores)?;
    check_scores("hinge_d", fake_scores)?;
    let real_term = mean_all(&relu(&affine(real_scores, -1.0, 1.0)?)?)?;
    let fake_term = mean_all(&relu(&affine(fake_scores, 1.0, 1.0)?)?)?;
    add(&real_term, &fake_term)
}

/// Generator hinge objective: −mean(D(G(z))).
pub fn hinge_g(fake_scores: &Tensor) -> Result<Tensor> {
    check_scores("hinge_g", fake_scores)?;
    affine(&mean_all(fake_scores)?, -1.0, 0.0)
}

/// Pixel reconstruction term: mean|gt − coarse| + mean|gt − refined|.
pub fn l1_recon(gt: &Tensor, coarse: &Tensor, refined: &Tensor) -> Result<Tensor> {
    let a = mean_all(&abs(&sub(gt, coarse)?)?)?;
    let b = mean_all(&abs(&sub(gt, refined)?)?)?;
    add(&a, &b)
}

/// Σ over taps of mean|Ψ(out) − Ψ(gt)|.
pub fn perceptual(
    backbone: &FeatureBackbone,
    out: &Tensor,
    gt: &Tensor,
    taps: &[&str],
) -> Result<Tensor> {
    if out.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "perceptual",
            detail: format!("{} vs {}", out.shape(), gt.shape()),
        });
    }
    if taps.is_empty() {
        return Err(Error::InvalidArg { op: "perceptual", detail: "no taps".to_string() });
    }
    let mut total: Option<Tensor> = None;
    for tap in taps {
        let fo = backbone.features(out, tap)?;
        let fg = backbone.features(gt, tap)?;
        let term = mean_all(&abs(&sub(&fo, &fg)?)?)?;
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Hole reconstruction term: Σ|M ⊙ (gt − refined)| ÷ (|M|·channels).
/// An empty mask contributes exactly zero.
pub fn patch_loss(mask: &BinaryMask, gt: &Tensor, refined: &Tensor) -> Result<Tensor> {
    let s = gt.shape();
    if refined.shape() != s {
        return Err(Error::Shape {
            op: "patch_loss",
            detail: format!("{} vs {}", s, refined.shape()),
        });
    }
    if s.n != 1 {
        return Err(Error::InvalidArg {
            op: "patch_loss",
            detail: "expects a single sample; batch handled by the caller".to_string(),
        });
    }
    if (mask.height(), mask.width()) != (s.h, s.w) {
        return Err(Error::Shape {
            op: "patch_loss",
            detail: format!("mask {}x{} vs image {}", mask.height(), mask.width(), s),
        });
    }
    let count = mask.count();
    if count == 0 {
        return Tensor::scalar(0.0).and_then(|z| affine(&z, 1.0, 0.0));
    }
    // Mask broadcast over channels as an untracked constant.
    let mut mdata = Vec::with_capacity(s.len());
    for _ in 0..s.c {
        mdata.extend(mask.bits().iter().map(|&b| b as f64));
    }
    let m = Tensor::constant(s, mdata)?;
    let total = crate::tensor::sum_all(&abs(&mul(&m, &sub(gt, refined)?)?)?)?;
    affine(&total, 1.0 / (count * s.c) as f64, 0.0)
}

/// Σ over taps of mean|gram(Ψ(out)) − gram(Ψ(gt))| for one sample.
pub fn style_loss(
    backbone: &FeatureBackbone,
    out: &Tensor,
    gt: &Tensor,
    taps: &[&str],
) -> Result<Tensor> {
    if out.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "style_loss",
            detail: format!("{} vs {}", out.shape(), gt.shape()),
        });
    }
    if taps.is_empty() {
        return Err(Error::InvalidArg { op: "style_loss", detail: "no taps".to_string() });
    }
    let mut total: Option<Tensor> = None;
    for tap in taps {
        let go = gram(&backbone.features(out, tap)?)?;
        let gg = gram(&backbone.features(gt, tap)?)?;
        let term = mean_all(&abs(&sub(&go, &gg)?)?)?;
        total = Some(match total {
            Some(t) => add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// The five scalar components, as graph nodes so the total stays
/// differentiable.
pub struct LossComponents {
    pub adversarial: Tensor,
    pub perceptual: Tensor,
    pub patch: Tensor,
    pub style: Tensor,
    pub reconstruction: Tensor,
}

/// Unweighted component values plus the weighted total, for logging and
/// ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adversarial: f64,
    pub perceptual: f64,
    pub patch: f64,
    pub style: f64,
    pub reconstruction: f64,
    pub total: f64,
}

/// Weighted sum of the five components. A zero weight excludes that
/// component from the total exactly; the report still carries its
/// unweighted value. A non-finite component is an error naming the term.
pub fn total_loss(weights: &LossWeights, comps: &LossComponents) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    let named = [
        ("adversarial", &comps.adversarial, weights.adversarial),
        ("perceptual", &comps.perceptual, weights.perceptual),
        ("patch", &comps.patch, weights.patch),
        ("style", &comps.style, weights.style),
        ("reconstruction", &comps.reconstruction, weights.reconstruction),
    ];
    for (name, t, _) in &named {
        if t.len() != 1 {
            return Err(Error::InvalidArg {
                op: "total_loss",
                detail: format!("{name} component is not a scalar"),
            });
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite { op: format!("loss component {name}") });
        }
    }
    let mut total: Option<Tensor> = None;
    for (_, t, w) in &named {
        if *w == 0.0 {
            continue;
        }
        let term = affine(t, *w, 0.0)?;
        total = Some(match total {
            Some(acc) => add(&acc, &term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => affine(&comps.reconstruction, 0.0, 0.0)?, // all weights zero
    };
    let report = LossReport {
        adversarial: comps.adversarial.item(),
        perceptual: comps.perceptual.item(),
        patch: comps.patch.item(),
        style: comps.style.item(),
        reconstruction: comps.reconstruction.item(),
        total: total.item(),
    };
    Ok((total, report))
}

/// Frozen feature extractor with named tap points.
///
/// The default is a seed-deterministic random conv stack: four blocks of
/// 3×3 conv + relu, average-pooled between blocks, tapped after each relu
/// as "block1" … "block4". Its parameters never receive gradients, so
/// backpropagation flows to the probed images only. Real pretrained
/// weights can be imported from a checkpoint container via
/// [`FeatureBackbone::from_container`].
pub struct FeatureBackbone {
    blocks: Vec<(Tensor, Tensor)>, // (weight, bias), untracked
    taps: Vec<String>,
}

impl FeatureBackbone {
    pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];

    /// Seed-deterministic random stack over `img_channels` inputs.
    pub fn seeded(seed: u64, img_channels: usize) -> FeatureBackbone {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        let mut in_c = img_channels;
        for (i, &out_c) in Self::DEFAULT_WIDTHS.iter().enumerate() {
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let wdata: Vec<f64> = (0..out_c * in_c * 9)
                .map(|_| {
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let w = Tensor::constant(Shape::new(out_c, in_c, 3, 3), wdata).expect("finite init");
            let b = Tensor::zeros(Shape::new(1, out_c, 1, 1));
            blocks.push((w, b));
            taps.push(format!("block{}", i + 1));
            in_c = out_c;
        }
        FeatureBackbone { blocks, taps }
    }

    /// Degenerate backbone whose single tap "input" returns the image
    /// unchanged. Useful for tests and loss sanity checks.
    pub fn identity() -> FeatureBackbone {
        FeatureBackbone { blocks: Vec::new(), taps: vec!["input".to_string()] }
    }

    /// Load conv weights exported into a checkpoint container. Records are
    /// expected as `backbone.block{i}.weight` / `backbone.block{i}.bias`
    /// for consecutive i starting at 1.
    pub fn from_container(path: &Path) -> Result<FeatureBackbone> {
        let ckpt = Checkpoint::load(path)?;
        let mut blocks = Vec::new();
        let mut taps = Vec::new();
        for i in 1.. {
            let wname = format!("backbone.block{i}.weight");
            let bname = format!("backbone.block{i}.bias");
            match (ckpt.get(&wname), ckpt.get(&bname)) {
                (Some(Record::F64 { shape: ws, data: wd }), Some(Record::F64 { shape: bs, data: bd })) => {
                    if ws.len() != 4 || bs.len() != 4 {
                        return Err(Error::Checkpoint(format!("{wname}: expected rank-4 arrays")));
                    }
                    let w = Tensor::constant(Shape::new(ws[0], ws[1], ws[2], ws[3]), wd.clone())?;
                    let b = Tensor::constant(Shape::new(bs[0], bs[1], bs[2], bs[3]), bd.clone())?;
                    blocks.push((w, b));
                    taps.push(format!("block{i}"));
                }
                (None, None) => break,
                _ => return Err(Error::Checkpoint(format!("incomplete backbone block {i}"))),
            }
        }
        if blocks.is_empty() {
            return Err(Error::Checkpoint("no backbone blocks in container".to_string()));
        }
        Ok(FeatureBackbone { blocks, taps })
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|s| s.as_str()).collect()
    }

    /// Default perceptual tap (deepest block).
    pub fn perceptual_taps(&self) -> Vec<&str> {
        vec![self.taps.last().expect("nonempty taps").as_str()]
    }

    /// Default style taps (two deepest blocks).
    pub fn style_taps(&self) -> Vec<&str> {
        let n = self.taps.len();
        if n >= 2 {
            vec![self.taps[n - 2].as_str(), self.taps[n - 1].as_str()]
        } else {
            vec![self.taps[n - 1].as_str()]
        }
    }

    /// Features at the named tap. Spatial extents shrink by half per block
    /// after the first, so inputs must stay even deep enough for the tap.
    pub fn features(&self, image: &Tensor, tap: &str) -> Result<Tensor> {
        let idx = self
            .taps
            .iter()
            .position(|t| t == tap)
            .ok_or_else(|| Error::InvalidArg {
                op: "FeatureBackbone::features",
                detail: format!("unknown tap {tap:?}"),
            })?;
        if self.blocks.is_empty() {
            return Ok(image.clone()); // identity backbone
        }
        let mut x = image.clone();
        for (i, (w, b)) in self.blocks[..=idx].iter().enumerate() {
            if i > 0 {
                x = avg_down2(&x)?;
            }
            x = activation(ActKind::Relu, &conv2d(&x, w, b, 1, 1, 1)?)?;
        }
        Ok(x)
    }

    /// Export as container records (for checkpoint embedding).
    pub fn records(&self) -> Vec<(String, Record)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                let ws = w.shape();
                let bs = b.shape();
                vec![
                    (
                        format!("backbone.block{}.weight", i + 1),
                        Record::F64 { shape: vec![ws.n, ws.c, ws.h, ws.w], data: w.to_vec() },
                    ),
                    (
                        format!("backbone.block{}.bias", i + 1),
                        Record::F64 { shape: vec![bs.n, bs.c, bs.h, bs.w], data: b.to_vec() },
                    ),
                ]
            })
            .collect()
    }
}
