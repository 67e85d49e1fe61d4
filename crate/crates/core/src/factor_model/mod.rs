//! Typed factors: representation, exact densities, sampling and the
//! closed-form conjugate posterior.

mod density;
mod factor;
mod gaussian;
mod oracle;
mod sampling;

pub use density::{
    log_likelihood_density, log_prior_density, log_unnormalized_posterior, LogPosterior,
};
pub use factor::{FactorSpec, FactorType, Observation, TaskInstance, Theta};
pub use gaussian::{GaussianDistribution, GaussianSampler};
pub use oracle::{conjugate_posterior_oracle, is_conjugate};
pub use sampling::{sample_from_factor, sample_observation, sample_prior, Draw};
