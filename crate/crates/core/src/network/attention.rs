//! Contextual attention: reconstruct features as similarity-weighted
//! copies of valid background patches.
//!
//! Every spatial position of `fg` is a query; its zero-padded patch is
//! scored by cosine similarity (norms smoothed by √(‖·‖² + 1e-8)) against
//! every background patch whose center has validity > 0, softmaxed with a
//! temperature `scale`. Invalid patches are excluded outright, so their
//! weight is exactly zero. The output is the coverage-normalized
//! overlap-add of the score-weighted patches, which keeps magnitudes on
//! the scale of the inputs.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    /// Patch side length, odd.
    pub patch: usize,
    /// Softmax temperature applied to similarities.
    pub scale: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { patch: 3, scale: 10.0 }
    }
}

/// Attention result for one forward call.
pub struct AttentionOutput {
    pub output: Tensor,
    /// Per sample: softmax weights, one row of `valid_positions[s].len()`
    /// entries per query position (row-major over the fg grid).
    pub weights: Vec<Vec<f64>>,
    /// Per sample: centers (y, x) of the candidate background patches.
    pub valid_positions: Vec<Vec<(usize, usize)>>,
}

/// Zero-padded patch of `plane_set` (c planes of h×w) centered at (cy, cx).
fn extract_patch(data: &[f64], c: usize, h: usize, w: usize, cy: usize, cx: usize, p: usize) -> Vec<f64> {
    let half = (p / 2) as i64;
    let mut out = vec![0.0; c * p * p];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for dy in 0..p {
            let y = cy as i64 + dy as i64 - half;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for dx in 0..p {
                let x = cx as i64 + dx as i64 - half;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                out[(ch * p + dy) * p + dx] = plane[y as usize * w + x as usize];
            }
        }
    }
    out
}

/// Adjoint of `extract_patch`: scatter-add a patch back into the grid.
fn scatter_patch(acc: &mut [f64], patch: &[f64], c: usize, h: usize, w: usize, cy: usize, cx: usize, p: usize) {
    let half = (p / 2) as i64;
    for ch in 0..c {
        for dy in 0..p {
            let y = cy as i64 + dy as i64 - half;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for dx in 0..p {
                let x = cx as i64 + dx as i64 - half;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                acc[(ch * h + y as usize) * w + x as usize] += patch[(ch * p + dy) * p + dx];
            }
        }
    }
}

fn smoothed_norm(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt()
}

/// How many patch placements cover each pixel.
fn coverage_map(h: usize, w: usize, p: usize) -> Vec<f64> {
    let half = (p / 2) as i64;
    let mut cov = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let ys = (y - half).max(0)..=(y + half).min(h as i64 - 1);
            let xs = (x - half).max(0)..=(x + half).min(w as i64 - 1);
            cov[(y * w as i64 + x) as usize] =
                (ys.count() * xs.count()) as f64;
        }
    }
    cov
}

struct SampleForward {
    valid: Vec<(usize, usize)>,
    keys: Vec<Vec<f64>>,
    key_norms: Vec<f64>,
    weights: Vec<f64>, // queries × valid, row-major
}

/// Borrow features for the missing region from valid background patches.
pub fn contextual_attention(
    fg: &Tensor,
    bg: &Tensor,
    validity: &Tensor,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let s = fg.shape();
    if bg.shape() != s {
        return Err(Error::Shape {
            op: "contextual_attention",
            detail: format!("fg {} vs bg {}", s, bg.shape()),
        });
    }
    let vs = validity.shape();
    if vs != Shape::new(s.n, 1, s.h, s.w) {
        return Err(Error::Shape {
            op: "contextual_attention",
            detail: format!("validity {} not aligned with features {}", vs, s),
        });
    }
    if cfg.patch % 2 == 0 || cfg.patch == 0 {
        return Err(Error::InvalidArg {
            op: "contextual_attention",
            detail: format!("patch size {} must be odd", cfg.patch),
        });
    }
    let (c, h, w, p) = (s.c, s.h, s.w, cfg.patch);
    let plane = c * h * w;
    let queries = h * w;
    let cov = coverage_map(h, w, p);

    let fg_d = fg.data();
    let bg_d = bg.data();
    let val_d = validity.data();

    let mut out = vec![0.0; s.len()];
    let mut forwards: Vec<SampleForward> = Vec::with_capacity(s.n);
    let mut all_weights = Vec::with_capacity(s.n);
    let mut all_valid = Vec::with_capacity(s.n);

    for ni in 0..s.n {
        let fgs = &fg_d[ni * plane..(ni + 1) * plane];
        let bgs = &bg_d[ni * plane..(ni + 1) * plane];
        let vals = &val_d[ni * h * w..(ni + 1) * h * w];

        let valid: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| vals[y * w + x] > 0.0)
            .collect();
        if valid.is_empty() {
            return Err(Error::NoValidPatch);
        }
        let keys: Vec<Vec<f64>> = valid
            .iter()
            .map(|&(y, x)| extract_patch(bgs, c, h, w, y, x, p))
            .collect();
        let key_norms: Vec<f64> = keys.iter().map(|k| smoothed_norm(k)).collect();

        let mut weights = vec![0.0; queries * valid.len()];
        let out_s = &mut out[ni * plane..(ni + 1) * plane];
        for qy in 0..h {
            for qx in 0..w {
                let q = extract_patch(fgs, c, h, w, qy, qx, p);
                let nq = smoothed_norm(&q);
                let qi = qy * w + qx;
                let row = &mut weights[qi * valid.len()..(qi + 1) * valid.len()];
                let mut max_s = f64::NEG_INFINITY;
                for (pi, key) in keys.iter().enumerate() {
                    let dot: f64 = q.iter().zip(key).map(|(a, b)| a * b).sum();
                    let score = cfg.scale * dot / (nq * key_norms[pi]);
                    row[pi] = score;
                    max_s = max_s.max(score);
                }
                let mut denom = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max_s).exp();
                    denom += *v;
                }
                for v in row.iter_mut() {
                    *v /= denom;
                }
                // Score-weighted aggregation of raw patches, overlap-added.
                let mut agg = vec![0.0; c * p * p];
                for (pi, key) in keys.iter().enumerate() {
                    let a = row[pi];
                    for (av, kv) in agg.iter_mut().zip(key) {
                        *av += a * kv;
                    }
                }
                scatter_patch(out_s, &agg, c, h, w, qy, qx, p);
            }
        }
        for ch in 0..c {
            for i in 0..h * w {
                out_s[ch * h * w + i] /= cov[i];
            }
        }
        all_weights.push(weights.clone());
        all_valid.push(valid.clone());
        forwards.push(SampleForward { valid, keys, key_norms, weights });
    }
    drop(fg_d);
    drop(bg_d);
    drop(val_d);

    let scale = cfg.scale;
    let output = Tensor::from_op(
        "contextual_attention",
        s,
        out,
        vec![fg.clone(), bg.clone()],
        Box::new(move |grad_out, parents| {
            let (fg, bg) = (&parents[0], &parents[1]);
            let fg_d = fg.data();
            let bg_d = bg.data();
            let mut d_fg = vec![0.0; fg_d.len()];
            let mut d_bg = vec![0.0; bg_d.len()];
            for (ni, fwd) in forwards.iter().enumerate() {
                let fgs = &fg_d[ni * plane..(ni + 1) * plane];
                let g_out = &grad_out[ni * plane..(ni + 1) * plane];
                let nv = fwd.valid.len();
                // Adjoint of coverage normalization feeds patch extraction
                // of the gradient at each query center.
                let gn: Vec<f64> = (0..plane)
                    .map(|i| g_out[i] / cov[i % (h * w)])
                    .collect();
                let mut d_keys = vec![0.0; nv * c * p * p];
                for qy in 0..h {
                    for qx in 0..w {
                        let qi = qy * w + qx;
                        let g_patch = extract_patch(&gn, c, h, w, qy, qx, p);
                        let row = &fwd.weights[qi * nv..(qi + 1) * nv];
                        // grad wrt aggregation: dA and dK(recon).
                        let mut g_a: Vec<f64> = Vec::with_capacity(nv);
                        for (pi, key) in fwd.keys.iter().enumerate() {
                            let dot: f64 = g_patch.iter().zip(key).map(|(a, b)| a * b).sum();
                            g_a.push(dot);
                            let a = row[pi];
                            if a != 0.0 {
                                let dk = &mut d_keys[pi * c * p * p..(pi + 1) * c * p * p];
                                for (dv, gv) in dk.iter_mut().zip(&g_patch) {
                                    *dv += a * gv;
                                }
                            }
                        }
                        // Softmax backward.
                        let inner: f64 = row.iter().zip(&g_a).map(|(a, g)| a * g).sum();
                        let g_s: Vec<f64> = row.iter().zip(&g_a).map(|(a, g)| a * (g - inner)).collect();
                        // Cosine-similarity backward.
                        let q = extract_patch(fgs, c, h, w, qy, qx, p);
                        let nq = smoothed_norm(&q);
                        let mut g_q = vec![0.0; c * p * p];
                        for (pi, key) in fwd.keys.iter().enumerate() {
                            let gs = g_s[pi];
                            if gs == 0.0 {
                                continue;
                            }
                            let nk = fwd.key_norms[pi];
                            let dot: f64 = q.iter().zip(key).map(|(a, b)| a * b).sum();
                            let c1 = scale * gs / (nq * nk);
                            let cq = scale * gs * dot / (nq * nq * nq * nk);
                            let ck = scale * gs * dot / (nq * nk * nk * nk);
                            for i in 0..g_q.len() {
                                g_q[i] += c1 * key[i] - cq * q[i];
                            }
                            let dk = &mut d_keys[pi * c * p * p..(pi + 1) * c * p * p];
                            for i in 0..dk.len() {
                                dk[i] += c1 * q[i] - ck * key[i];
                            }
                        }
                        scatter_patch(&mut d_fg[ni * plane..(ni + 1) * plane], &g_q, c, h, w, qy, qx, p);
                    }
                }
                for (pi, &(y, x)) in fwd.valid.iter().enumerate() {
                    scatter_patch(
                        &mut d_bg[ni * plane..(ni + 1) * plane],
                        &d_keys[pi * c * p * p..(pi + 1) * c * p * p],
                        c,
                        h,
                        w,
                        y,
                        x,
                        p,
                    );
                }
            }
            drop(fg_d);
            drop(bg_d);
            fg.accumulate_grad(&d_fg);
            bg.accumulate_grad(&d_bg);
        }),
    )?;

    Ok(AttentionOutput { output, weights: all_weights, valid_positions: all_valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, mean_all, mul};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, tracked: bool) -> Tensor {
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shape = Shape::new(1, c, h, w);
        if tracked {
            Tensor::param(shape, data).unwrap()
        } else {
            Tensor::constant(shape, data).unwrap()
        }
    }

    fn all_valid(h: usize, w: usize) -> Tensor {
        Tensor::filled(Shape::new(1, 1, h, w), 1.0).unwrap()
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fg = rand_features(&mut rng, 3, 5, 5, false);
        let out = contextual_attention(&fg, &fg, &all_valid(5, 5), &AttentionConfig::default()).unwrap();
        let nv = out.valid_positions[0].len();
        for q in 0..25 {
            let sum: f64 = out.weights[0][q * nv..(q + 1) * nv].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_retrieval_when_bg_is_fg() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fg = rand_features(&mut rng, 4, 6, 6, false);
        let out = contextual_attention(&fg, &fg, &all_valid(6, 6), &AttentionConfig::default()).unwrap();
        let nv = out.valid_positions[0].len();
        assert_eq!(nv, 36);
        for q in 0..36 {
            let row = &out.weights[0][q * nv..(q + 1) * nv];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (y, x) = out.valid_positions[0][argmax];
            assert_eq!(y * 6 + x, q, "query {q} retrieved ({y},{x})");
        }
    }

    #[test]
    fn single_valid_patch_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fg = rand_features(&mut rng, 2, 4, 4, false);
        let bg = rand_features(&mut rng, 2, 4, 4, false);
        let mut val = vec![0.0; 16];
        val[2 * 4 + 1] = 0.5;
        let validity = Tensor::constant(Shape::new(1, 1, 4, 4), val).unwrap();
        let out = contextual_attention(&fg, &bg, &validity, &AttentionConfig::default()).unwrap();
        assert_eq!(out.valid_positions[0], vec![(2, 1)]);
        assert!(out.weights[0].iter().all(|&w| w == 1.0));
        // Output = coverage-normalized overlap-add of that one patch
        // placed at every query.
        let patch = extract_patch(&bg.to_vec(), 2, 4, 4, 2, 1, 3);
        let cov = coverage_map(4, 4, 3);
        let mut expect = vec![0.0; 2 * 16];
        for qy in 0..4 {
            for qx in 0..4 {
                scatter_patch(&mut expect, &patch, 2, 4, 4, qy, qx, 3);
            }
        }
        for ch in 0..2 {
            for i in 0..16 {
                expect[ch * 16 + i] /= cov[i];
            }
        }
        for (a, e) in out.output.to_vec().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn no_valid_patch_is_an_error() {
        let fg = Tensor::filled(Shape::new(1, 1, 3, 3), 0.5).unwrap();
        let validity = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(
            contextual_attention(&fg, &fg, &validity, &AttentionConfig::default()),
            Err(Error::NoValidPatch)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fg = rand_features(&mut rng, 2, 4, 4, true);
        let bg = rand_features(&mut rng, 2, 4, 4, true);
        let mut val = vec![1.0; 16];
        val[0] = 0.0;
        val[5] = 0.0;
        let validity = Tensor::constant(Shape::new(1, 1, 4, 4), val).unwrap();
        let cfg = AttentionConfig::default();
        let err = finite_diff_check(
            || {
                let out = contextual_attention(&fg, &bg, &validity, &cfg)?;
                mean_all(&mul(&out.output, &out.output)?)
            },
            &[fg.clone(), bg.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
