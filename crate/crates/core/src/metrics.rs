//! Image-fidelity measures: mean L1 error, mean L2 error, PSNR, SSIM.
//!
//! All operate on images in [0, 1]. PSNR of identical images is the +inf
//! sentinel, printed as "inf" by the reporting layer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Scores for one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub l1_error: f64,
    pub l2_error: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-sample scores plus their arithmetic means.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> MetricReport {
        let n = per_sample.len().max(1) as f64;
        let mut mean = SampleMetrics { l1_error: 0.0, l2_error: 0.0, psnr_db: 0.0, ssim: 0.0 };
        for s in &per_sample {
            mean.l1_error += s.l1_error / n;
            mean.l2_error += s.l2_error / n;
            mean.psnr_db += s.psnr_db / n;
            mean.ssim += s.ssim / n;
        }
        MetricReport { per_sample, mean }
    }
}

fn check_pair(op: &'static str, gt: &Tensor, out: &Tensor) -> Result<()> {
    if gt.shape() != out.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{} vs {}", gt.shape(), out.shape()),
        });
    }
    Ok(())
}

/// Mean absolute and mean squared error.
pub fn l1_l2_error(gt: &Tensor, out: &Tensor) -> Result<(f64, f64)> {
    check_pair("l1_l2_error", gt, out)?;
    let n = gt.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (&a, &b) in gt.data().iter().zip(out.data().iter()) {
        let d = a - b;
        l1 += d.abs();
        l2 += d * d;
    }
    Ok((l1 / n, l2 / n))
}

/// PSNR in dB from a mean squared error.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB.
pub fn psnr(gt: &Tensor, out: &Tensor, peak: f64) -> Result<f64> {
    let (_, mse) = l1_l2_error(gt, out)?;
    Ok(psnr_from_mse(mse, peak))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filtering of an h×w plane.
fn gauss_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Rows first.
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let dst = &mut tmp[y * ow..(y + 1) * ow];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * row[x + i];
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Map of local SSIM values for one channel plane (valid positions only).
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = gauss_valid(a, h, w, k);
    let mu_b = gauss_valid(b, h, w, k);
    let e_a2 = gauss_valid(&a2, h, w, k);
    let e_b2 = gauss_valid(&b2, h, w, k);
    let e_ab = gauss_valid(&ab, h, w, k);
    mu_a.iter()
        .zip(&mu_b)
        .zip(&e_a2)
        .zip(&e_b2)
        .zip(&e_ab)
        .map(|((((&ma, &mb), &ea2), &eb2), &eab)| {
            let va = ea2 - ma * ma;
            let vb = eb2 - mb * mb;
            let cov = eab - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (vb + va + SSIM_C2))
        })
        .collect()
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// averaged over valid window positions, channels, and batch.
pub fn ssim(gt: &Tensor, out: &Tensor) -> Result<f64> {
    check_pair("ssim", gt, out)?;
    let s = gt.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::InvalidArg {
            op: "ssim",
            detail: format!("image {}x{} smaller than {SSIM_WINDOW}-pixel window", s.h, s.w),
        });
    }
    let k = gaussian_kernel();
    let plane = s.h * s.w;
    let gd = gt.data();
    let od = out.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let vals = ssim_plane(&gd[p * plane..(p + 1) * plane], &od[p * plane..(p + 1) * plane], s.h, s.w, &k);
        total += vals.iter().sum::<f64>();
        count += vals.len();
    }
    Ok(total / count as f64)
}

/// Hole-restricted variant: L1/L2/PSNR over masked pixels only, SSIM
/// averaged over windows whose center lies in the mask. Returns None for
/// SSIM when no window center falls inside the mask.
pub fn masked_metrics(
    gt: &Tensor,
    out: &Tensor,
    mask: &crate::mask::BinaryMask,
) -> Result<(f64, f64, f64, Option<f64>)> {
    check_pair("masked_metrics", gt, out)?;
    let s = gt.shape();
    if (mask.height(), mask.width()) != (s.h, s.w) {
        return Err(Error::Shape {
            op: "masked_metrics",
            detail: "mask extents differ from image".to_string(),
        });
    }
    let gd = gt.data();
    let od = out.data();
    let (mut l1, mut l2, mut n) = (0.0, 0.0, 0usize);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                if mask.get(y, x) {
                    let i = s.idx(0, c, y, x);
                    let d = gd[i] - od[i];
                    l1 += d.abs();
                    l2 += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0, f64::INFINITY, None));
    }
    let (l1, l2) = (l1 / n as f64, l2 / n as f64);

    let mut ssim_hole = None;
    if s.h >= SSIM_WINDOW && s.w >= SSIM_WINDOW {
        let k = gaussian_kernel();
        let plane = s.h * s.w;
        let half = SSIM_WINDOW / 2;
        let ow = s.w - SSIM_WINDOW + 1;
        let (mut total, mut count) = (0.0, 0usize);
        for p in 0..s.c {
            let vals =
                ssim_plane(&gd[p * plane..(p + 1) * plane], &od[p * plane..(p + 1) * plane], s.h, s.w, &k);
            for (i, v) in vals.iter().enumerate() {
                let (y, x) = (i / ow + half, i % ow + half);
                if mask.get(y, x) {
                    total += v;
                    count += 1;
                }
            }
        }
        if count > 0 {
            ssim_hole = Some(total / count as f64);
        }
    }
    Ok((l1, l2, psnr_from_mse(l2, 1.0), ssim_hole))
}

/// Full scores for one pair in [0, 1].
pub fn evaluate_pair(gt: &Tensor, out: &Tensor) -> Result<SampleMetrics> {
    let (l1, l2) = l1_l2_error(gt, out)?;
    Ok(SampleMetrics {
        l1_error: l1,
        l2_error: l2,
        psnr_db: psnr_from_mse(l2, 1.0),
        ssim: ssim(gt, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::constant(Shape::new(1, c, h, w), data).unwrap()
    }

    #[test]
    fn identical_images_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_image(&mut rng, 3, 16, 16);
        let (l1, l2) = l1_l2_error(&a, &a).unwrap();
        assert_eq!((l1, l2), (0.0, 0.0));
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_offset_errors() {
        let a = Tensor::filled(Shape::new(1, 1, 4, 4), 0.3).unwrap();
        let b = Tensor::filled(Shape::new(1, 1, 4, 4), 0.4).unwrap();
        let (l1, l2) = l1_l2_error(&a, &b).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12);
        assert!((l2 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn psnr_analytic_point() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, 2, 8, 8);
        let b = rand_image(&mut rng, 2, 8, 8);
        let (_, mse) = l1_l2_error(&a, &b).unwrap();
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Zero variances: SSIM = C1 / (1 + C1).
        let zero = Tensor::filled(Shape::new(1, 1, 16, 16), 0.0).unwrap();
        let one = Tensor::filled(Shape::new(1, 1, 16, 16), 1.0).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::filled(Shape::new(1, 1, 8, 8), 0.5).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 3, 16, 16);
        let b = rand_image(&mut rng, 3, 16, 16);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn self_ssim_is_locally_maximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_image(&mut rng, 1, 16, 16);
        let base = ssim(&a, &a).unwrap();
        for _ in 0..10 {
            let noise: Vec<f64> = a
                .to_vec()
                .iter()
                .map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect();
            let b = Tensor::constant(a.shape(), noise).unwrap();
            assert!(ssim(&a, &b).unwrap() <= base);
        }
    }

    #[test]
    fn report_mean_is_arithmetic() {
        let r = MetricReport::from_samples(vec![
            SampleMetrics { l1_error: 0.1, l2_error: 0.01, psnr_db: 20.0, ssim: 0.9 },
            SampleMetrics { l1_error: 0.3, l2_error: 0.03, psnr_db: 10.0, ssim: 0.7 },
        ]);
        assert!((r.mean.l1_error - 0.2).abs() < 1e-12);
        assert!((r.mean.psnr_db - 15.0).abs() < 1e-12);
    }
}
