//! Exact log densities of every factor family.

use std::f64::consts::PI;

use libm::lgamma;
use nalgebra::DMatrix;

use super::factor::{FactorSpec, TaskInstance, Theta};
use crate::error::{AfinError, Result};
use crate::tape::softplus;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Factor with constants precomputed so repeated evaluation is cheap.
#[derive(Debug, Clone)]
pub(crate) enum Prepared {
    DiagGaussian {
        mu: Vec<f64>,
        inv_sigma: Vec<f64>,
        norm: f64,
    },
    FullrankGaussian {
        mu: Vec<f64>,
        precision: DMatrix<f64>,
        norm: f64,
    },
    DiagStudentT {
        mu: Vec<f64>,
        inv_sigma: Vec<f64>,
        nu: f64,
        norm: f64,
    },
    DiagLaplace {
        mu: Vec<f64>,
        inv_scale: Vec<f64>,
        norm: f64,
    },
    Gaussian {
        y: Vec<f64>,
        inv_sigma: f64,
        norm: f64,
    },
    LinGaussian {
        x: Vec<f64>,
        y: f64,
        inv_sigma: f64,
        norm: f64,
    },
    LinStudentT {
        x: Vec<f64>,
        y: f64,
        inv_sigma: f64,
        nu: f64,
        norm: f64,
    },
    Bernoulli {
        x: Vec<f64>,
        y: f64,
    },
    Binomial {
        x: Vec<f64>,
        y: f64,
        trials: f64,
        log_choose: f64,
    },
}

fn student_norm(nu: f64) -> f64 {
    lgamma(0.5 * (nu + 1.0)) - lgamma(0.5 * nu) - 0.5 * (nu * PI).ln()
}

fn log_choose(n: f64, k: f64) -> f64 {
    lgamma(n + 1.0) - lgamma(k + 1.0) - lgamma(n - k + 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Prepared {
    pub(crate) fn new(f: &FactorSpec, d: usize) -> Result<Self> {
        f.validate(d)?;
        Ok(match &f.theta {
            Theta::DiagGaussian { mu, sigma } => Prepared::DiagGaussian {
                mu: mu.clone(),
                inv_sigma: sigma.iter().map(|s| 1.0 / s).collect(),
                norm: -sigma.iter().map(|s| HALF_LOG_2PI + s.ln()).sum::<f64>(),
            },
            Theta::FullrankGaussian { mu, precision } => {
                let lam = DMatrix::from_fn(d, d, |i, j| precision[i][j]);
                let ch = lam.clone().cholesky().expect("validated precision");
                let half_logdet: f64 = ch.l().diagonal().iter().map(|v| v.ln()).sum();
                Prepared::FullrankGaussian {
                    mu: mu.clone(),
                    precision: lam,
                    norm: -(d as f64) * HALF_LOG_2PI + half_logdet,
                }
            }
            Theta::DiagStudentT { mu, sigma, nu } => Prepared::DiagStudentT {
                mu: mu.clone(),
                inv_sigma: sigma.iter().map(|s| 1.0 / s).collect(),
                nu: *nu,
                norm: sigma.iter().map(|s| student_norm(*nu) - s.ln()).sum(),
            },
            Theta::DiagLaplace { mu, scale } => Prepared::DiagLaplace {
                mu: mu.clone(),
                inv_scale: scale.iter().map(|s| 1.0 / s).collect(),
                norm: -scale.iter().map(|s| (2.0 * s).ln()).sum::<f64>(),
            },
            Theta::Gaussian { sigma } => Prepared::Gaussian {
                y: f.y_vector()?.to_vec(),
                inv_sigma: 1.0 / sigma,
                norm: -(d as f64) * (HALF_LOG_2PI + sigma.ln()),
            },
            Theta::LinGaussian { sigma } => Prepared::LinGaussian {
                x: f.x()?.to_vec(),
                y: f.y_scalar()?,
                inv_sigma: 1.0 / sigma,
                norm: -HALF_LOG_2PI - sigma.ln(),
            },
            Theta::LinStudentT { sigma, nu } => Prepared::LinStudentT {
                x: f.x()?.to_vec(),
                y: f.y_scalar()?,
                inv_sigma: 1.0 / sigma,
                nu: *nu,
                norm: student_norm(*nu) - sigma.ln(),
            },
            Theta::BernoulliLogit {} => Prepared::Bernoulli {
                x: f.x()?.to_vec(),
                y: f.y_scalar()?,
            },
            Theta::BinomialLogit { trials } => {
                let y = f.y_scalar()?;
                let n = f64::from(*trials);
                Prepared::Binomial {
                    x: f.x()?.to_vec(),
                    y,
                    trials: n,
                    log_choose: log_choose(n, y),
                }
            }
        })
    }

    pub(crate) fn log_density(&self, z: &[f64]) -> f64 {
        match self {
            Prepared::DiagGaussian {
                mu,
                inv_sigma,
                norm,
            } => {
                let mut q = 0.0;
                for i in 0..z.len() {
                    let t = (z[i] - mu[i]) * inv_sigma[i];
                    q += t * t;
                }
                norm - 0.5 * q
            }
            Prepared::FullrankGaussian {
                mu,
                precision,
                norm,
            } => {
                let d = z.len();
                let mut q = 0.0;
                for i in 0..d {
                    let ri = z[i] - mu[i];
                    let mut row = 0.0;
                    for j in 0..d {
                        row += precision[(i, j)] * (z[j] - mu[j]);
                    }
                    q += ri * row;
                }
                norm - 0.5 * q
            }
            Prepared::DiagStudentT {
                mu,
                inv_sigma,
                nu,
                norm,
            } => {
                let mut s = 0.0;
                for i in 0..z.len() {
                    let t = (z[i] - mu[i]) * inv_sigma[i];
                    s += (t * t / nu).ln_1p();
                }
                norm - 0.5 * (nu + 1.0) * s
            }
            Prepared::DiagLaplace {
                mu,
                inv_scale,
                norm,
            } => {
                let mut s = 0.0;
                for i in 0..z.len() {
                    s += (z[i] - mu[i]).abs() * inv_scale[i];
                }
                norm - s
            }
            Prepared::Gaussian { y, inv_sigma, norm } => {
                let mut q = 0.0;
                for i in 0..z.len() {
                    let t = (y[i] - z[i]) * inv_sigma;
                    q += t * t;
                }
                norm - 0.5 * q
            }
            Prepared::LinGaussian {
                x,
                y,
                inv_sigma,
                norm,
            } => {
                let t = (y - dot(x, z)) * inv_sigma;
                norm - 0.5 * t * t
            }
            Prepared::LinStudentT {
                x,
                y,
                inv_sigma,
                nu,
                norm,
            } => {
                let t = (y - dot(x, z)) * inv_sigma;
                norm - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()
            }
            Prepared::Bernoulli { x, y } => {
                let eta = dot(x, z);
                if *y == 1.0 {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                }
            }
            Prepared::Binomial {
                x,
                y,
                trials,
                log_choose,
            } => {
                let eta = dot(x, z);
                log_choose - y * softplus(-eta) - (trials - y) * softplus(eta)
            }
        }
    }
}

fn check_z(d: usize, z: &[f64]) -> Result<()> {
    if z.len() != d {
        return Err(AfinError::Shape(format!(
            "z has length {} but d = {d}",
            z.len()
        )));
    }
    Ok(())
}

fn logit_finite(f: &FactorSpec, z: &[f64]) -> Result<()> {
    if let Some(x) = &f.covariate {
        if !dot(x, z).is_finite() {
            return Err(AfinError::NonFinite(format!(
                "{} linear predictor",
                f.factor_type()
            )));
        }
    }
    Ok(())
}

/// `log p(z | t₀, θ₀)` including normalizing constants.
pub fn log_prior_density(prior: &FactorSpec, z: &[f64]) -> Result<f64> {
    if !prior.factor_type().is_prior() {
        return Err(AfinError::InvalidFactor(format!(
            "{} is not a prior family",
            prior.factor_type()
        )));
    }
    Ok(Prepared::new(prior, z.len())?.log_density(z))
}

/// `log p(y | z, t, θ)` including normalizing constants.
pub fn log_likelihood_density(factor: &FactorSpec, z: &[f64]) -> Result<f64> {
    if factor.factor_type().is_prior() {
        return Err(AfinError::InvalidFactor(format!(
            "{} is not a likelihood family",
            factor.factor_type()
        )));
    }
    logit_finite(factor, z)?;
    Ok(Prepared::new(factor, z.len())?.log_density(z))
}

/// `log p(z, y_{1:N})`.
pub fn log_unnormalized_posterior(task: &TaskInstance, z: &[f64]) -> Result<f64> {
    check_z(task.d, z)?;
    let mut total = log_prior_density(&task.prior, z)?;
    for f in &task.likelihoods {
        total += log_likelihood_density(f, z)?;
    }
    Ok(total)
}

/// Reusable evaluator of `log p(z, y_{1:N})` for one task. Produces the same
/// bits as [`log_unnormalized_posterior`].
#[derive(Debug, Clone)]
pub struct LogPosterior {
    d: usize,
    prior: Prepared,
    likelihoods: Vec<Prepared>,
}

impl LogPosterior {
    pub fn new(task: &TaskInstance) -> Result<Self> {
        Ok(Self {
            d: task.d,
            prior: Prepared::new(&task.prior, task.d)?,
            likelihoods: task
                .likelihoods
                .iter()
                .map(|f| Prepared::new(f, task.d))
                .collect::<Result<_>>()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.d);
        let mut total = self.prior.log_density(z);
        for f in &self.likelihoods {
            total += f.log_density(z);
        }
        total
    }

    pub fn log_prior(&self, z: &[f64]) -> f64 {
        self.prior.log_density(z)
    }
}
