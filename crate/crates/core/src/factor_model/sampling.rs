use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal, StudentT};

use super::factor::{FactorSpec, Observation, Theta};
use super::gaussian::GaussianDistribution;
use crate::error::{AfinError, Result};
use crate::tape::sigmoid;
use crate::tensor::Tensor;

/// A draw from [`sample_from_factor`].
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Latent(Vec<f64>),
    Observation(Observation),
}

fn laplace(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn student(nu: f64, rng: &mut impl Rng) -> Result<f64> {
    let t = StudentT::new(nu).map_err(|e| AfinError::InvalidFactor(format!("student-t: {e}")))?;
    Ok(t.sample(rng))
}

/// Exact draw of `z` from a prior factor.
pub fn sample_prior(theta: &Theta, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(match theta {
        Theta::DiagGaussian { mu, sigma } => mu
            .iter()
            .zip(sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Theta::FullrankGaussian { mu, precision } => {
            let d = mu.len();
            let flat: Vec<f64> = precision.iter().flatten().copied().collect();
            let g = GaussianDistribution::new(mu.clone(), Tensor::from_vec(d, d, flat))?;
            g.sampler()?.sample(rng)
        }
        Theta::DiagStudentT { mu, sigma, nu } => {
            let mut z = Vec::with_capacity(mu.len());
            for (m, s) in mu.iter().zip(sigma) {
                z.push(m + s * student(*nu, rng)?);
            }
            z
        }
        Theta::DiagLaplace { mu, scale } => mu
            .iter()
            .zip(scale)
            .map(|(m, s)| m + s * laplace(rng))
            .collect(),
        other => {
            return Err(AfinError::InvalidFactor(format!(
                "{} is not a prior family",
                other.factor_type()
            )))
        }
    })
}

/// Exact draw of `y` from a likelihood factor given `z`.
pub fn sample_observation(
    theta: &Theta,
    covariate: Option<&[f64]>,
    z: &[f64],
    rng: &mut impl Rng,
) -> Result<Observation> {
    let eta = || -> Result<f64> {
        let x = covariate.ok_or_else(|| {
            AfinError::InvalidFactor(format!("{} needs a covariate row", theta.factor_type()))
        })?;
        if x.len() != z.len() {
            return Err(AfinError::Shape(format!(
                "covariate has length {} but d = {}",
                x.len(),
                z.len()
            )));
        }
        Ok(x.iter().zip(z).map(|(a, b)| a * b).sum())
    };
    Ok(match theta {
        Theta::Gaussian { sigma } => Observation::Vector(
            z.iter()
                .map(|zi| zi + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ),
        Theta::LinGaussian { sigma } => {
            Observation::Scalar(eta()? + sigma * rng.sample::<f64, _>(StandardNormal))
        }
        Theta::LinStudentT { sigma, nu } => {
            Observation::Scalar(eta()? + sigma * student(*nu, rng)?)
        }
        Theta::BernoulliLogit {} => {
            let p = sigmoid(eta()?);
            Observation::Scalar(if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        }
        Theta::BinomialLogit { trials } => {
            let p = sigmoid(eta()?);
            let b = Binomial::new(u64::from(*trials), p)
                .map_err(|e| AfinError::InvalidFactor(format!("binomial: {e}")))?;
            Observation::Scalar(b.sample(rng) as f64)
        }
        other => {
            return Err(AfinError::InvalidFactor(format!(
                "{} is not a likelihood family",
                other.factor_type()
            )))
        }
    })
}

/// Prior factors take no `z` and return a latent draw; likelihood factors
/// need `z` and return an observation.
pub fn sample_from_factor(
    factor: &FactorSpec,
    z: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<Draw> {
    match (factor.factor_type().is_prior(), z) {
        (true, None) => sample_prior(&factor.theta, rng).map(Draw::Latent),
        (false, Some(z)) => sample_observation(&factor.theta, factor.covariate.as_deref(), z, rng)
            .map(Draw::Observation),
        (true, Some(_)) => Err(AfinError::InvalidFactor("prior sampling takes no z".into())),
        (false, None) => Err(AfinError::InvalidFactor(
            "likelihood sampling needs z".into(),
        )),
    }
}
