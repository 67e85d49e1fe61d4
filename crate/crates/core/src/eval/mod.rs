//! Posterior refinement and accuracy metrics: SNIS, moment errors, sliced
//! W2, importance-weight diagnostics and an MCMC reference sampler.

mod mcmc;
mod metrics;
mod pareto;
mod quadrature;
mod snis;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use mcmc::{adaptive_rwm, McmcConfig, McmcRun, ACCEPTANCE_BAND};
pub use metrics::{
    metric_m1, metric_m2, sample_moments, sliced_w2, sliced_w2_subsampled, sliced_w2_weighted,
    subsample, weight_diagnostics, weighted_moments, Directions, Moments, WeightDiagnostics,
};
pub use pareto::{gpd_fit, pareto_k, tail_len, MIN_SAMPLES as PARETO_MIN_SAMPLES};
pub use quadrature::quadrature_moments;
pub use snis::{snis, AfinProposal, Proposal, WeightedSampleSet};

use crate::error::{AfinError, Result};
use crate::factor_model::{
    conjugate_posterior_oracle, is_conjugate, LogPosterior, TaskInstance, Theta,
};
use crate::network::{Afin, DecoderVariant};
use crate::params::ParameterStore;
use crate::rng::{purpose, stream};

/// Version of the report row layout.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "afin")]
    Afin,
    #[serde(rename = "afin+snis")]
    AfinSnis,
    #[serde(rename = "mcmc")]
    Mcmc,
    #[serde(rename = "oracle")]
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Afin, Method::AfinSnis, Method::Mcmc, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Afin => "afin",
            Method::AfinSnis => "afin+snis",
            Method::Mcmc => "mcmc",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AfinError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                AfinError::Config(format!(
                    "unknown method {s:?} (expected afin, afin+snis, mcmc or oracle)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Sample counts (`afin`, `afin+snis`, `oracle`) or post-warmup
    /// iterations (`mcmc`).
    pub budgets: Vec<usize>,
    /// Reference draws per task.
    pub reference_samples: usize,
    /// Post-warmup iterations of the reference chain for tasks without a
    /// closed-form posterior.
    pub mcmc_reference_iterations: usize,
    /// Warmup length as a fraction of the post-warmup iterations.
    pub mcmc_warmup_frac: f64,
    pub slices: usize,
    pub variant: DecoderVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            budgets: vec![100, 1000, 10_000],
            reference_samples: 10_000,
            mcmc_reference_iterations: 200_000,
            mcmc_warmup_frac: 0.25,
            slices: Directions::DEFAULT_COUNT,
            variant: DecoderVariant::Gaussian,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.budgets.is_empty() {
            return Err(AfinError::Config(
                "eval needs at least one method and one budget".into(),
            ));
        }
        if self.budgets.iter().any(|&b| b < 2) {
            return Err(AfinError::Config("every budget must be at least 2".into()));
        }
        if self.reference_samples < 2 || self.mcmc_reference_iterations < 2 || self.slices == 0 {
            return Err(AfinError::Config(
                "reference sizes and slice count must be positive".into(),
            ));
        }
        if !(self.mcmc_warmup_frac >= 0.0 && self.mcmc_warmup_frac.is_finite()) {
            return Err(AfinError::Config(
                "mcmc_warmup_frac must be a non-negative number".into(),
            ));
        }
        Ok(())
    }
}

/// One (task, method, budget) result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub seed: u64,
    pub task_id: usize,
    pub method: Method,
    pub budget: usize,
    pub m1: f64,
    pub m2: f64,
    pub sw2: f64,
    pub pareto_k: f64,
    pub max_weight: f64,
    pub entropy_ratio: f64,
    pub energy_gap: f64,
    pub wallclock_s: f64,
    /// `oracle` or `mcmc-rwm`.
    pub reference: &'static str,
    /// MCMC acceptance left the healthy band (reference or method chain).
    pub mcmc_warning: bool,
}

/// Ground truth for one task.
pub struct Reference {
    pub moments: Moments,
    pub samples: Vec<Vec<f64>>,
    pub kind: &'static str,
    pub warning: bool,
}

/// A location inside the prior's bulk, used to start chains.
pub fn prior_location(task: &TaskInstance) -> Vec<f64> {
    match &task.prior.theta {
        Theta::DiagGaussian { mu, .. }
        | Theta::FullrankGaussian { mu, .. }
        | Theta::DiagStudentT { mu, .. }
        | Theta::DiagLaplace { mu, .. } => mu.clone(),
        _ => vec![0.0; task.d],
    }
}

/// Exact posterior for conjugate tasks, a long adaptive-RWM chain otherwise.
pub fn reference(
    task: &TaskInstance,
    cfg: &EvalConfig,
    seed: u64,
    task_id: usize,
) -> Result<Reference> {
    let mut rng = stream(seed, &[purpose::REFERENCE, task_id as u64]);
    if is_conjugate(task) {
        let post = conjugate_posterior_oracle(task)?;
        return Ok(Reference {
            moments: Moments::of_gaussian(&post)?,
            samples: post.sample_n(cfg.reference_samples, &mut rng)?,
            kind: "oracle",
            warning: false,
        });
    }
    let lp = LogPosterior::new(task)?;
    let run = adaptive_rwm(
        &|z| lp.eval(z),
        &prior_location(task),
        &McmcConfig::with_warmup_frac(cfg.mcmc_reference_iterations, cfg.mcmc_warmup_frac),
        &mut rng,
    )?;
    Ok(Reference {
        moments: sample_moments(&run.samples)?,
        samples: run.samples,
        kind: "mcmc-rwm",
        warning: run.warning,
    })
}

/// Every configured (method, budget) row for one task, plus notices for
/// skipped combinations.
pub fn evaluate_task(
    net: &Afin,
    store: &ParameterStore,
    task: &TaskInstance,
    task_id: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<String>)> {
    cfg.validate()?;
    let reference = reference(task, cfg, seed, task_id)?;
    let lp = LogPosterior::new(task)?;
    let log_target = |z: &[f64]| lp.eval(z);
    let dirs = Directions::random(
        task.d,
        cfg.slices,
        &mut stream(seed, &[purpose::SLICES, task_id as u64]),
    );
    let ref_set = WeightedSampleSet::uniform(reference.samples.clone())?;
    let conjugate = is_conjugate(task);
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        if method == Method::Oracle && !conjugate {
            notices.push(format!(
                "task {task_id}: no closed-form posterior, skipping method oracle"
            ));
            continue;
        }
        for (bi, &budget) in cfg.budgets.iter().enumerate() {
            let mut rng = stream(seed, &[purpose::EVAL, task_id as u64, mi as u64, bi as u64]);
            let start = Instant::now();
            let mut warning = reference.warning;
            let (set, moments, k_hat) = match method {
                Method::Afin | Method::AfinSnis => {
                    let q = AfinProposal::new(net, store, task, cfg.variant)?;
                    if method == Method::Afin {
                        let (samples, _) = q.draw(budget, &mut rng)?;
                        let m = sample_moments(&samples)?;
                        (WeightedSampleSet::uniform(samples)?, m, f64::NAN)
                    } else {
                        let set = snis(&q, &log_target, budget, &mut rng)?;
                        let m = weighted_moments(&set)?;
                        let k = pareto_k(&set.log_raw_weights);
                        (set, m, k)
                    }
                }
                Method::Mcmc => {
                    let run = adaptive_rwm(
                        &log_target,
                        &prior_location(task),
                        &McmcConfig::with_warmup_frac(budget, cfg.mcmc_warmup_frac),
                        &mut rng,
                    )?;
                    warning |= run.warning;
                    let m = sample_moments(&run.samples)?;
                    (WeightedSampleSet::uniform(run.samples)?, m, f64::NAN)
                }
                Method::Oracle => {
                    let post = conjugate_posterior_oracle(task)?;
                    let samples = post.sample_n(budget, &mut rng)?;
                    (
                        WeightedSampleSet::uniform(samples)?,
                        Moments::of_gaussian(&post)?,
                        f64::NAN,
                    )
                }
            };
            let wallclock_s = start.elapsed().as_secs_f64();
            let sw2 = if method == Method::AfinSnis {
                sliced_w2_weighted(&set, &ref_set, &dirs)?
            } else {
                sliced_w2_subsampled(&set.samples, &reference.samples, &dirs, &mut rng)?
            };
            let diag = weight_diagnostics(&set, &log_target, &reference.samples);
            rows.push(MetricsRow {
                schema_version: REPORT_SCHEMA_VERSION,
                seed,
                task_id,
                method,
                budget,
                m1: metric_m1(&moments, &reference.moments),
                m2: metric_m2(&moments, &reference.moments),
                sw2,
                pareto_k: k_hat,
                max_weight: diag.max_weight,
                entropy_ratio: diag.entropy_ratio,
                energy_gap: diag.energy_gap,
                wallclock_s,
                reference: reference.kind,
                mcmc_warning: warning,
            });
        }
    }
    Ok((rows, notices))
}
