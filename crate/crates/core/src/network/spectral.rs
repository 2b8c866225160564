//! Spectral normalization by power iteration.
//!
//! A conv weight (out_c, in_c, kh, kw) is viewed as an out_c × (in_c·kh·kw)
//! matrix. Persistent left/right power vectors estimate its top singular
//! value; the normalized weight divides by that estimate. The gradient
//! treats the converged vectors as constants, so a forward pass is a
//! deterministic, differentiable function of the raw weight.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Clone, Debug)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn l2norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matrix_dims(weight: &Tensor) -> (usize, usize) {
    let s = weight.shape();
    (s.n, s.c * s.h * s.w)
}

impl SpectralState {
    /// Random unit vectors, seeded for reproducibility.
    pub fn new(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SpectralState {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (nu, nv) = (l2norm(&u).max(1e-12), l2norm(&v).max(1e-12));
        u.iter_mut().for_each(|x| *x /= nu);
        v.iter_mut().for_each(|x| *x /= nv);
        SpectralState { u, v }
    }

    /// Run `iters` power iterations against `weight`'s current values.
    pub fn iterate(&mut self, weight: &Tensor, iters: usize) -> Result<()> {
        let (rows, cols) = matrix_dims(weight);
        if self.u.len() != rows || self.v.len() != cols {
            return Err(Error::Shape {
                op: "SpectralState::iterate",
                detail: format!(
                    "state ({}, {}) vs matrix ({rows}, {cols})",
                    self.u.len(),
                    self.v.len()
                ),
            });
        }
        let w = weight.data();
        for _ in 0..iters {
            // v ← normalize(Wᵀu), u ← normalize(Wv)
            for j in 0..cols {
                let mut acc = 0.0;
                for i in 0..rows {
                    acc += w[i * cols + j] * self.u[i];
                }
                self.v[j] = acc;
            }
            let nv = l2norm(&self.v);
            if nv < 1e-300 {
                return Err(Error::InvalidArg {
                    op: "spectral_normalize",
                    detail: "zero weight matrix".to_string(),
                });
            }
            self.v.iter_mut().for_each(|x| *x /= nv);
            for i in 0..rows {
                let row = &w[i * cols..(i + 1) * cols];
                self.u[i] = row.iter().zip(&self.v).map(|(a, b)| a * b).sum();
            }
            let nu = l2norm(&self.u);
            if nu < 1e-300 {
                return Err(Error::InvalidArg {
                    op: "spectral_normalize",
                    detail: "zero weight matrix".to_string(),
                });
            }
            self.u.iter_mut().for_each(|x| *x /= nu);
        }
        Ok(())
    }

    /// Current estimate σ ≈ uᵀ W v.
    pub fn sigma(&self, weight: &Tensor) -> f64 {
        let (rows, cols) = matrix_dims(weight);
        let w = weight.data();
        let mut sigma = 0.0;
        for i in 0..rows {
            let row = &w[i * cols..(i + 1) * cols];
            let wv: f64 = row.iter().zip(&self.v).map(|(a, b)| a * b).sum();
            sigma += self.u[i] * wv;
        }
        sigma
    }
}

/// Divide `weight` by the σ estimate held in `state` without updating it.
/// Differentiable: d(W/σ) accounts for σ's dependence on W with u, v fixed.
pub fn normalize_with_state(weight: &Tensor, state: &SpectralState) -> Result<Tensor> {
    let sigma = state.sigma(weight);
    if sigma.abs() < 1e-300 {
        return Err(Error::InvalidArg {
            op: "spectral_normalize",
            detail: "zero weight matrix".to_string(),
        });
    }
    let data: Vec<f64> = weight.data().iter().map(|&x| x / sigma).collect();
    let (rows, cols) = matrix_dims(weight);
    let u = state.u.clone();
    let v = state.v.clone();
    Tensor::from_op(
        "spectral_normalize",
        weight.shape(),
        data,
        vec![weight.clone()],
        Box::new(move |grad_out, parents| {
            let w = &parents[0];
            let wd = w.data();
            // ⟨G, W⟩ term from σ(W) = uᵀWv.
            let gw: f64 = grad_out.iter().zip(wd.iter()).map(|(g, x)| g * x).sum();
            let coef = gw / (sigma * sigma);
            let mut delta = vec![0.0; wd.len()];
            for i in 0..rows {
                for j in 0..cols {
                    delta[i * cols + j] = grad_out[i * cols + j] / sigma - coef * u[i] * v[j];
                }
            }
            drop(wd);
            w.accumulate_grad(&delta);
        }),
    )
}

/// Run `iters ≥ 1` power iterations, then return the normalized weight.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState, iters: usize) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::InvalidArg {
            op: "spectral_normalize",
            detail: "iters must be ≥ 1".to_string(),
        });
    }
    state.iterate(weight, iters)?;
    normalize_with_state(weight, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, mean_all, mul, Shape};

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::constant(Shape::new(rows, cols, 1, 1), data).unwrap()
    }

    #[test]
    fn diagonal_matrix_normalizes_analytically() {
        let w = matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = SpectralState::new(2, 2, &mut rng);
        let out = spectral_normalize(&w, &mut st, 60).unwrap();
        let got = out.to_vec();
        assert!((got[0] - 1.0).abs() < 1e-6, "{got:?}");
        assert!((got[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn identity_matrix_unchanged() {
        let w = matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = SpectralState::new(3, 3, &mut rng);
        let out = spectral_normalize(&w, &mut st, 50).unwrap();
        for (a, b) in out.to_vec().iter().zip(w.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_matrix_rejected() {
        let w = matrix(2, 3, vec![0.0; 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = SpectralState::new(2, 3, &mut rng);
        assert!(spectral_normalize(&w, &mut st, 5).is_err());
        assert!(spectral_normalize(&w, &mut st, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::param(Shape::new(3, 4, 1, 1), data).unwrap();
        let mut st = SpectralState::new(3, 4, &mut rng);
        st.iterate(&w, 40).unwrap();
        let err = finite_diff_check(
            || {
                let n = normalize_with_state(&w, &st)?;
                mean_all(&mul(&n, &n)?)
            },
            &[w.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
