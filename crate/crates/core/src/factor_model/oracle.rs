use nalgebra::{DMatrix, DVector};

use super::factor::{TaskInstance, Theta};
use super::gaussian::GaussianDistribution;
use crate::error::{AfinError, Result};
use crate::tensor::Tensor;

/// True when the posterior is available in closed form: a Gaussian prior
/// with only `lin_gaussian` or vector `gaussian` likelihoods.
pub fn is_conjugate(task: &TaskInstance) -> bool {
    matches!(
        task.prior.theta,
        Theta::DiagGaussian { .. } | Theta::FullrankGaussian { .. }
    ) && task
        .likelihoods
        .iter()
        .all(|f| matches!(f.theta, Theta::LinGaussian { .. } | Theta::Gaussian { .. }))
}

/// Exact Gaussian posterior of a conjugate task:
/// `Λ* = Λ₀ + Σ x xᵀ/σ²`, `μ* = Λ*⁻¹(Λ₀μ₀ + Σ x y/σ²)`.
pub fn conjugate_posterior_oracle(task: &TaskInstance) -> Result<GaussianDistribution> {
    let d = task.d;
    let (mut lam, mut eta) = match &task.prior.theta {
        Theta::DiagGaussian { mu, sigma } => {
            let lam = DMatrix::from_fn(d, d, |i, j| if i == j { sigma[i].powi(-2) } else { 0.0 });
            let eta = DVector::from_fn(d, |i, _| mu[i] / (sigma[i] * sigma[i]));
            (lam, eta)
        }
        Theta::FullrankGaussian { mu, precision } => {
            let lam = DMatrix::from_fn(d, d, |i, j| precision[i][j]);
            let eta = &lam * DVector::from_column_slice(mu);
            (lam, eta)
        }
        other => {
            return Err(AfinError::Unsupported(format!(
                "no closed-form posterior for a {} prior",
                other.factor_type()
            )))
        }
    };
    for f in &task.likelihoods {
        match &f.theta {
            Theta::LinGaussian { sigma } => {
                let x = f.x()?;
                let y = f.y_scalar()?;
                let w = 1.0 / (sigma * sigma);
                for i in 0..d {
                    eta[i] += w * x[i] * y;
                    for j in 0..d {
                        lam[(i, j)] += w * x[i] * x[j];
                    }
                }
            }
            Theta::Gaussian { sigma } => {
                let y = f.y_vector()?;
                let w = 1.0 / (sigma * sigma);
                for i in 0..d {
                    eta[i] += w * y[i];
                    lam[(i, i)] += w;
                }
            }
            other => {
                return Err(AfinError::Unsupported(format!(
                    "no closed-form posterior with a {} likelihood",
                    other.factor_type()
                )))
            }
        }
    }
    let ch = lam.clone().cholesky().ok_or_else(|| {
        AfinError::InvalidTask("posterior precision is not positive definite".into())
    })?;
    let mean = ch.solve(&eta);
    let mut precision = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            precision.set(i, j, lam[(i, j)]);
        }
    }
    GaussianDistribution::new(mean.iter().copied().collect(), precision)
}
