//! Adaptive random-walk Metropolis reference sampler.
//!
//! During warmup the proposal covariance tracks the running covariance of
//! the chain (scaled by `2.38²/d`) and a global step scale is tuned towards
//! 23.4% acceptance; both are frozen afterwards so the post-warmup chain is
//! a plain Metropolis chain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{AfinError, Result};

/// Acceptance rates outside this band raise the warning flag.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.05, 0.95);
const TARGET_ACCEPTANCE: f64 = 0.234;
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct McmcRun {
    pub samples: Vec<Vec<f64>>,
    /// Post-warmup acceptance rate.
    pub acceptance: f64,
    /// Set when the acceptance rate left [`ACCEPTANCE_BAND`].
    pub warning: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcConfig {
    pub iterations: usize,
    pub warmup: usize,
    /// Keep every `thin`-th post-warmup state.
    pub thin: usize,
    /// Proposal standard deviation before any adaptation.
    pub initial_scale: f64,
}

impl McmcConfig {
    pub fn new(iterations: usize, warmup: usize) -> Self {
        Self {
            iterations,
            warmup,
            thin: 1,
            initial_scale: 0.1,
        }
    }

    /// Warmup of `max(500, ⌈frac · iterations⌉)` steps.
    pub fn with_warmup_frac(iterations: usize, frac: f64) -> Self {
        Self::new(
            iterations,
            ((iterations as f64 * frac).ceil() as usize).max(500),
        )
    }
}

/// Runs one chain from `start`. `iterations` excludes warmup.
pub fn adaptive_rwm(
    log_target: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    cfg: &McmcConfig,
    rng: &mut dyn RngCore,
) -> Result<McmcRun> {
    let d = start.len();
    if d == 0 || cfg.iterations == 0 || cfg.thin == 0 {
        return Err(AfinError::Config(
            "MCMC needs d, iterations and thin positive".into(),
        ));
    }
    let mut x = DVector::from_column_slice(start);
    let mut lp = log_target(start);
    if !lp.is_finite() {
        return Err(AfinError::NonFinite(format!(
            "MCMC start has log density {lp}"
        )));
    }
    let sd = 2.38 * 2.38 / d as f64;
    let mut log_scale = 0.0f64;
    let mut chol = DMatrix::identity(d, d) * cfg.initial_scale;
    // running moments of the warmup chain
    let mut mean = x.clone();
    let mut m2 = DMatrix::zeros(d, d);
    let mut count = 1.0;

    let step = |x: &mut DVector<f64>,
                lp: &mut f64,
                chol: &DMatrix<f64>,
                scale: f64,
                rng: &mut dyn RngCore| {
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prop = &*x + chol * e * scale;
        let lp_prop = log_target(prop.as_slice());
        let accept_prob = if lp_prop.is_nan() {
            0.0
        } else {
            (lp_prop - *lp).exp().min(1.0)
        };
        if rng.random::<f64>() < accept_prob {
            *x = prop;
            *lp = lp_prop;
            (accept_prob, true)
        } else {
            (accept_prob, false)
        }
    };

    for t in 0..cfg.warmup {
        let (a, _) = step(&mut x, &mut lp, &chol, log_scale.exp(), rng);
        log_scale += (a - TARGET_ACCEPTANCE) / ((t + 1) as f64).powf(0.6);
        count += 1.0;
        let delta = &x - &mean;
        mean += &delta / count;
        m2 += &delta * (&x - &mean).transpose();
        // refresh the covariance factor on a doubling schedule and at the end
        if count >= 2.0 * d as f64 + 2.0 && ((t + 1).is_power_of_two() || t + 1 == cfg.warmup) {
            let cov = &m2 / (count - 1.0) * sd + DMatrix::identity(d, d) * JITTER;
            if let Some(c) = cov.cholesky() {
                chol = c.l();
                log_scale = 0.0;
            }
        }
    }

    let scale = log_scale.exp();
    let mut samples = Vec::with_capacity(cfg.iterations / cfg.thin);
    let mut accepted = 0usize;
    for t in 0..cfg.iterations {
        let (_, acc) = step(&mut x, &mut lp, &chol, scale, rng);
        accepted += acc as usize;
        if (t + 1) % cfg.thin == 0 {
            samples.push(x.as_slice().to_vec());
        }
    }
    let acceptance = accepted as f64 / cfg.iterations as f64;
    Ok(McmcRun {
        samples,
        acceptance,
        warning: !(ACCEPTANCE_BAND.0..=ACCEPTANCE_BAND.1).contains(&acceptance),
    })
}
