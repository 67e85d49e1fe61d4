//! Moments of a low-dimensional unnormalized density by tensor-product
//! Simpson quadrature, as an independent check of closed-form posteriors.
//!
//! A coarse axis-aligned pass locates the mass; refinement passes then
//! integrate over ±`HALF_WIDTH` standard deviations along the principal
//! axes of the previous estimate.

use nalgebra::{DMatrix, SymmetricEigen};

use super::metrics::Moments;
use crate::error::{AfinError, Result};
use crate::tensor::Tensor;

const HALF_WIDTH: f64 = 12.0;

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            let c = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// Integrates `exp(log_density)` against `1, z, z zᵀ` on the affine grid
/// `center + A u`, `u ∈ [−w, w]^d`, with `n` (even) intervals per axis.
fn grid_moments(
    log_density: &dyn Fn(&[f64]) -> f64,
    center: &[f64],
    axes: &DMatrix<f64>,
    n: usize,
) -> Result<Moments> {
    let d = center.len();
    let h = 2.0 * HALF_WIDTH / n as f64;
    let wts = simpson_weights(n, h);
    let points = (n + 1).pow(d as u32);
    let mut logs = Vec::with_capacity(points);
    let mut zs = Vec::with_capacity(points);
    let mut idx = vec![0usize; d];
    for _ in 0..points {
        let u: Vec<f64> = idx.iter().map(|&i| -HALF_WIDTH + i as f64 * h).collect();
        let z: Vec<f64> = (0..d)
            .map(|r| center[r] + (0..d).map(|c| axes[(r, c)] * u[c]).sum::<f64>())
            .collect();
        let w: f64 = idx.iter().map(|&i| wts[i]).product();
        logs.push((log_density(&z), w));
        zs.push(z);
        for k in 0..d {
            idx[k] += 1;
            if idx[k] <= n {
                break;
            }
            idx[k] = 0;
        }
    }
    let max = logs.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(AfinError::NonFinite(
            "density vanishes on the quadrature grid".into(),
        ));
    }
    let mut mass = 0.0;
    let mut mean = vec![0.0; d];
    for ((l, w), z) in logs.iter().zip(&zs) {
        let p = w * (l - max).exp();
        mass += p;
        for (m, v) in mean.iter_mut().zip(z) {
            *m += p * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= mass);
    let mut cov = Tensor::zeros(d, d);
    for ((l, w), z) in logs.iter().zip(&zs) {
        let p = w * (l - max).exp() / mass;
        for i in 0..d {
            for j in 0..d {
                let v = cov.get(i, j) + p * (z[i] - mean[i]) * (z[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    Ok(Moments { mean, cov })
}

/// Mean and covariance of the normalized `exp(log_density)` for `d ≤ 2`.
/// The first pass covers `center ± half_width` in every coordinate.
pub fn quadrature_moments(
    log_density: &dyn Fn(&[f64]) -> f64,
    center: &[f64],
    half_width: f64,
) -> Result<Moments> {
    let d = center.len();
    if !(1..=2).contains(&d) {
        return Err(AfinError::Unsupported(format!(
            "quadrature supports d = 1, 2 (got {d})"
        )));
    }
    let (coarse, fine) = if d == 1 { (4000, 2000) } else { (600, 240) };
    let axes = DMatrix::identity(d, d) * (half_width / HALF_WIDTH);
    let mut m = grid_moments(log_density, center, &axes, coarse)?;
    // a posterior narrower than the coarse spacing would collapse the first
    // refinement onto one node
    let mut min_var = (2.0 * half_width / coarse as f64).powi(2);
    for _ in 0..2 {
        let cov = DMatrix::from_row_slice(d, d, m.cov.data());
        let eig = SymmetricEigen::new(cov);
        let mut axes = eig.eigenvectors.clone();
        for c in 0..d {
            let sd = eig.eigenvalues[c].max(min_var).sqrt();
            for r in 0..d {
                axes[(r, c)] *= sd;
            }
        }
        m = grid_moments(log_density, &m.mean.clone(), &axes, fine)?;
        min_var = 1e-300;
    }
    Ok(m)
}
