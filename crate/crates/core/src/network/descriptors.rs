//! Fixed-width per-coordinate descriptors of a single factor.
//!
//! Node descriptors `ξ^node_i` collect the natural per-coordinate
//! quantities of the factor (location, log-scale, covariate entry, scalar
//! broadcasts of `y`, `ν`, `n_c`). Pair descriptors are
//! `[ξ^node_i, ξ^node_j, cross terms…, 1{i=j}]`.
//!
//! | type | node | pair cross terms |
//! |---|---|---|
//! | `diag_gaussian` | `μ_i, log σ_i, μ_i/σ_i` | – |
//! | `fullrank_gaussian` | `μ_i, log Λ_ii, (Λμ)_i` | `Λ_ij` |
//! | `diag_student_t` | `μ_i, log σ_i, μ_i/σ_i, log ν` | – |
//! | `diag_laplace` | `μ_i, log s_i, μ_i/s_i` | – |
//! | `gaussian` | `y_i, log σ, y_i/σ², 1/σ²` | – |
//! | `lin_gaussian` | `x_i, y, log σ, x_i y/σ²` | `x_i x_j, x_i x_j/σ²` |
//! | `lin_student_t` | `x_i, y, log σ, log ν, x_i y/σ²` | `x_i x_j, x_i x_j/σ²` |
//! | `bernoulli_logit` | `x_i, y, (y − ½) x_i` | `x_i x_j` |
//! | `binomial_logit` | `x_i, y, n_c, y/n_c, (y/n_c − ½) x_i` | `x_i x_j, n_c x_i x_j/4` |

use crate::error::{AfinError, Result};
use crate::factor_model::{FactorSpec, FactorType, Theta};
use crate::tensor::Tensor;

/// `(χ^node, χ^pair)` for a factor type.
pub fn descriptor_widths(ty: FactorType) -> (usize, usize) {
    let node = node_width(ty);
    (node, 2 * node + cross_width(ty) + 1)
}

fn node_width(ty: FactorType) -> usize {
    match ty {
        FactorType::DiagGaussian
        | FactorType::FullrankGaussian
        | FactorType::DiagLaplace
        | FactorType::BernoulliLogit => 3,
        FactorType::DiagStudentT | FactorType::Gaussian | FactorType::LinGaussian => 4,
        FactorType::LinStudentT | FactorType::BinomialLogit => 5,
    }
}

fn cross_width(ty: FactorType) -> usize {
    match ty {
        FactorType::FullrankGaussian | FactorType::BernoulliLogit => 1,
        FactorType::LinGaussian | FactorType::LinStudentT | FactorType::BinomialLogit => 2,
        _ => 0,
    }
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(AfinError::Shape(format!(
            "{name} has length {}, expected {d}",
            v.len()
        )));
    }
    Ok(())
}

/// Node descriptor (`d × χ^node`) and pair descriptor (`d² × χ^pair`,
/// row `i·d + j`).
pub fn build_descriptors(f: &FactorSpec, d: usize) -> Result<(Tensor, Tensor)> {
    let ty = f.factor_type();
    let (wn, wp) = descriptor_widths(ty);
    let mut node = Tensor::zeros(d, wn);
    // cross terms for pair (i, j)
    let mut cross: Box<dyn Fn(usize, usize) -> Vec<f64>> = Box::new(|_, _| Vec::new());
    match &f.theta {
        Theta::DiagGaussian { mu, sigma } => {
            check_len("mu", mu, d)?;
            check_len("sigma", sigma, d)?;
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[mu[i], sigma[i].ln(), mu[i] / sigma[i]]);
            }
        }
        Theta::FullrankGaussian { mu, precision } => {
            check_len("mu", mu, d)?;
            if precision.len() != d || precision.iter().any(|r| r.len() != d) {
                return Err(AfinError::Shape(format!("precision must be {d}×{d}")));
            }
            for i in 0..d {
                let lm: f64 = (0..d).map(|j| precision[i][j] * mu[j]).sum();
                node.row_mut(i)
                    .copy_from_slice(&[mu[i], precision[i][i].ln(), lm]);
            }
            let p = precision.clone();
            cross = Box::new(move |i, j| vec![p[i][j]]);
        }
        Theta::DiagStudentT { mu, sigma, nu } => {
            check_len("mu", mu, d)?;
            check_len("sigma", sigma, d)?;
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[mu[i], sigma[i].ln(), mu[i] / sigma[i], nu.ln()]);
            }
        }
        Theta::DiagLaplace { mu, scale } => {
            check_len("mu", mu, d)?;
            check_len("scale", scale, d)?;
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[mu[i], scale[i].ln(), mu[i] / scale[i]]);
            }
        }
        Theta::Gaussian { sigma } => {
            let y = f.y_vector()?;
            check_len("y", y, d)?;
            let prec = 1.0 / (sigma * sigma);
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[y[i], sigma.ln(), y[i] * prec, prec]);
            }
        }
        Theta::LinGaussian { sigma } => {
            let (x, y) = (f.x()?.to_vec(), f.y_scalar()?);
            check_len("x", &x, d)?;
            let prec = 1.0 / (sigma * sigma);
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[x[i], y, sigma.ln(), x[i] * y * prec]);
            }
            cross = Box::new(move |i, j| vec![x[i] * x[j], x[i] * x[j] * prec]);
        }
        Theta::LinStudentT { sigma, nu } => {
            let (x, y) = (f.x()?.to_vec(), f.y_scalar()?);
            check_len("x", &x, d)?;
            let prec = 1.0 / (sigma * sigma);
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[x[i], y, sigma.ln(), nu.ln(), x[i] * y * prec]);
            }
            cross = Box::new(move |i, j| vec![x[i] * x[j], x[i] * x[j] * prec]);
        }
        Theta::BernoulliLogit {} => {
            let (x, y) = (f.x()?.to_vec(), f.y_scalar()?);
            check_len("x", &x, d)?;
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[x[i], y, (y - 0.5) * x[i]]);
            }
            cross = Box::new(move |i, j| vec![x[i] * x[j]]);
        }
        Theta::BinomialLogit { trials } => {
            let (x, y) = (f.x()?.to_vec(), f.y_scalar()?);
            check_len("x", &x, d)?;
            let n = *trials as f64;
            for i in 0..d {
                node.row_mut(i)
                    .copy_from_slice(&[x[i], y, n, y / n, (y / n - 0.5) * x[i]]);
            }
            cross = Box::new(move |i, j| vec![x[i] * x[j], n * x[i] * x[j] / 4.0]);
        }
    }
    let mut pair = Tensor::zeros(d * d, wp);
    for i in 0..d {
        for j in 0..d {
            let row = pair.row_mut(i * d + j);
            row[..wn].copy_from_slice(node.row(i));
            row[wn..2 * wn].copy_from_slice(node.row(j));
            let c = cross(i, j);
            row[2 * wn..2 * wn + c.len()].copy_from_slice(&c);
            row[wp - 1] = if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok((node, pair))
}
