//! Spectral normalization by power iteration.

use crate::tensor::Tensor;

/// Floor applied to the singular value estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub sigma: f32,
}

/// Rows of the matrix view of a weight: its leading dimension.
pub fn matrix_dims(weight: &Tensor) -> (usize, usize) {
    let rows = weight.shape()[0];
    (rows, weight.len() / rows)
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(SIGMA_FLOOR);
    x.iter_mut().for_each(|v| *v /= norm);
}

/// Runs `iters` power-iteration steps from `u` on the `rows × cols`
/// row-major matrix `w` and returns the refreshed `(u, v, σ̂ = uᵀWv)`.
pub fn power_iteration(w: &[f32], rows: usize, cols: usize, u: &[f32], iters: usize) -> SpectralEstimate {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(u.len(), rows);
    let mut uu: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let mut vv = vec![0.0f64; cols];
    for _ in 0..iters.max(1) {
        vv.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in uu.iter().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            vv.iter_mut().zip(row).for_each(|(v, &wv)| *v += ur * wv as f64);
        }
        normalize(&mut vv);
        for (r, ur) in uu.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *ur = row.iter().zip(&vv).map(|(&wv, v)| wv as f64 * v).sum();
        }
        normalize(&mut uu);
    }
    let mut sigma = 0.0f64;
    for (r, ur) in uu.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        sigma += ur * row.iter().zip(&vv).map(|(&wv, v)| wv as f64 * v).sum::<f64>();
    }
    SpectralEstimate {
        u: uu.iter().map(|&x| x as f32).collect(),
        v: vv.iter().map(|&x| x as f32).collect(),
        sigma: sigma.max(SIGMA_FLOOR) as f32,
    }
}

/// One power-iteration step on `weight` (viewed as leading-dim × rest)
/// followed by division by the estimated largest singular value. Returns
/// the normalized weight and the refreshed `u`.
pub fn spectral_normalize(weight: &Tensor, u: &[f32]) -> (Tensor, Vec<f32>) {
    let (rows, cols) = matrix_dims(weight);
    let est = power_iteration(weight.data(), rows, cols, u, 1);
    let normalized = weight.map(|x| x / est.sigma);
    (normalized, est.u)
}

/// The `v` and `σ̂` implied by a stored `u` without advancing it.
pub fn frozen_estimate(weight: &Tensor, u: &[f32]) -> SpectralEstimate {
    let (_, cols) = matrix_dims(weight);
    let mut vv = vec![0.0f64; cols];
    for (r, &ur) in u.iter().enumerate() {
        let row = &weight.data()[r * cols..(r + 1) * cols];
        vv.iter_mut().zip(row).for_each(|(v, &wv)| *v += ur as f64 * wv as f64);
    }
    normalize(&mut vv);
    let mut sigma = 0.0f64;
    for (r, &ur) in u.iter().enumerate() {
        let row = &weight.data()[r * cols..(r + 1) * cols];
        sigma += ur as f64 * row.iter().zip(&vv).map(|(&wv, v)| wv as f64 * v).sum::<f64>();
    }
    SpectralEstimate {
        u: u.to_vec(),
        v: vv.iter().map(|&x| x as f32).collect(),
        sigma: sigma.max(SIGMA_FLOOR) as f32,
    }
}
