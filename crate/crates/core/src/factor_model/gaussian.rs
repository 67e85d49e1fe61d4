use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AfinError, Result};
use crate::tensor::Tensor;

/// Multivariate normal in mean/precision form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDistribution {
    pub mean: Vec<f64>,
    /// `d×d`, symmetric positive definite.
    pub precision: Tensor,
}

impl GaussianDistribution {
    pub fn new(mean: Vec<f64>, precision: Tensor) -> Result<Self> {
        let d = mean.len();
        if precision.shape() != (d, d) {
            return Err(AfinError::Shape(format!(
                "precision is {}x{} for mean of length {d}",
                precision.rows(),
                precision.cols()
            )));
        }
        let g = Self { mean, precision };
        g.cholesky()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, self.precision.data())
    }

    pub(crate) fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        if !self.precision.all_finite() || !self.mean.iter().all(|v| v.is_finite()) {
            return Err(AfinError::NonFinite("gaussian parameters".into()));
        }
        self.matrix()
            .cholesky()
            .ok_or_else(|| AfinError::InvalidFactor("precision is not positive definite".into()))
    }

    pub fn covariance(&self) -> Result<Tensor> {
        let inv = self.cholesky()?.inverse();
        let d = self.dim();
        let mut t = Tensor::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                // symmetrize away round-off
                t.set(i, j, 0.5 * (inv[(i, j)] + inv[(j, i)]));
            }
        }
        Ok(t)
    }

    /// Prepared sampler / density evaluator.
    pub fn sampler(&self) -> Result<GaussianSampler> {
        let ch = self.cholesky()?;
        let l = ch.l();
        let half_logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        Ok(GaussianSampler {
            mean: DVector::from_column_slice(&self.mean),
            lt: l.transpose(),
            norm: -(self.dim() as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() + half_logdet,
        })
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.sampler()?.log_density(z))
    }

    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let s = self.sampler()?;
        Ok((0..n).map(|_| s.sample(rng)).collect())
    }
}

/// `N(μ, Λ⁻¹)` with `Λ = L Lᵀ` factored once.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    lt: DMatrix<f64>,
    norm: f64,
}

impl GaussianSampler {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `z = μ + L⁻ᵀ ε`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        let e = DVector::from_column_slice(eps);
        let x = self
            .lt
            .solve_upper_triangular(&e)
            .expect("cholesky factor has positive diagonal");
        (x + &self.mean).iter().copied().collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.transform(&eps)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        let r = DVector::from_column_slice(z) - &self.mean;
        let w = &self.lt * r;
        self.norm - 0.5 * w.norm_squared()
    }
}
