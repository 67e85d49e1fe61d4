//! Random generator of training and evaluation tasks.
//!
//! Sizes `(d, N)` come from a mixture of a uniform law and a law biased
//! towards large `d` and small `N`. Each task then draws a prior factor,
//! `z` from it, a list of likelihood types (homogeneous or a Dirichlet
//! mixture), covariate rows from one of four design families, and
//! observations from the likelihoods.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{ChiSquared, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AfinError, Result};
use crate::factor_model::{
    sample_observation, sample_prior, FactorSpec, FactorType, TaskInstance, Theta,
};
use crate::rng::{purpose, stream};

/// Spread of the sampled design spectrum (variances, log-uniform).
pub const SPECTRUM_RANGE: (f64, f64) = (0.2, 5.0);
/// Degrees of freedom of the heavy-tailed design family.
pub const DESIGN_T_DOF: f64 = 4.0;
/// Binomial trial counts are uniform on this inclusive range.
pub const TRIALS_RANGE: (u32, u32) = (2, 8);
pub const PRIOR_LOCATION_SCALE: f64 = 0.45;
pub const DIAG_GAUSSIAN_LOG_SIGMA: (f64, f64) = (-0.8, 0.0);
pub const STUDENT_T_LOG_SIGMA: (f64, f64) = (-0.7, 0.0);
pub const LAPLACE_LOG_SCALE: (f64, f64) = (-1.0, -0.05);
pub const DOF_RANGE: (f64, f64) = (3.0, 8.0);
pub const FULLRANK_M_SCALE: f64 = 0.3;
pub const FULLRANK_RIDGE: f64 = 0.5;
/// Observation noise: `log σ ~ U(-1, 0)`.
pub const NOISE_LOG_SIGMA: (f64, f64) = (-1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignFamily {
    Iid,
    DiagScale,
    Correlated,
    StudentT,
}

impl DesignFamily {
    pub const ALL: [DesignFamily; 4] = [
        DesignFamily::Iid,
        DesignFamily::DiagScale,
        DesignFamily::Correlated,
        DesignFamily::StudentT,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub d_min: usize,
    pub d_max: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub p_hard: f64,
    pub alpha_d: f64,
    pub alpha_n: f64,
    pub homogeneous_prob: f64,
    pub dirichlet_conc: f64,
    /// Probabilities of iid, diag_scale, correlated, student_t.
    pub design_family_probs: [f64; 4],
    pub base_scale_coeff: f64,
    pub prior_types: Vec<FactorType>,
    pub likelihood_types: Vec<FactorType>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            d_min: 1,
            d_max: 16,
            n_min: 1,
            n_max: 256,
            p_hard: 0.6,
            alpha_d: 1.0,
            alpha_n: 0.75,
            homogeneous_prob: 0.5,
            dirichlet_conc: 0.5,
            design_family_probs: [0.7, 0.1, 0.1, 0.1],
            base_scale_coeff: 0.9,
            prior_types: FactorType::PRIORS.to_vec(),
            likelihood_types: FactorType::LIKELIHOODS.to_vec(),
        }
    }
}

impl SimulatorConfig {
    /// Gaussian priors with linear-Gaussian likelihoods only, so every task
    /// has a closed-form posterior.
    pub fn conjugate(d_max: usize, n_max: usize) -> Self {
        Self {
            d_max,
            n_max,
            prior_types: vec![FactorType::DiagGaussian],
            likelihood_types: vec![FactorType::LinGaussian],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(AfinError::Config(format!("simulator: {m}")));
        if self.d_min == 0 || self.d_min > self.d_max {
            return err("need 1 <= d_min <= d_max");
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return err("need 1 <= n_min <= n_max");
        }
        for (name, p) in [
            ("p_hard", self.p_hard),
            ("homogeneous_prob", self.homogeneous_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self
            .design_family_probs
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
            || (self.design_family_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return err("design_family_probs must be a probability vector");
        }
        if self.dirichlet_conc <= 0.0 || self.base_scale_coeff <= 0.0 {
            return err("dirichlet_conc and base_scale_coeff must be positive");
        }
        if !self.alpha_d.is_finite() || !self.alpha_n.is_finite() {
            return err("alpha_d and alpha_n must be finite");
        }
        if self.prior_types.is_empty() || self.prior_types.iter().any(|t| !t.is_prior()) {
            return err("prior_types must be a non-empty list of prior families");
        }
        if self.likelihood_types.is_empty() || self.likelihood_types.iter().any(|t| t.is_prior()) {
            return err("likelihood_types must be a non-empty list of likelihood families");
        }
        Ok(())
    }
}

fn weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    WeightedIndex::new(weights)
        .expect("weights are positive and finite")
        .sample(rng)
}

/// Draws `(d, N)`.
pub fn sample_task_sizes(cfg: &SimulatorConfig, rng: &mut impl Rng) -> (usize, usize) {
    let ds = cfg.d_min..=cfg.d_max;
    let ns = cfg.n_min..=cfg.n_max;
    if rng.random::<f64>() < cfg.p_hard {
        // the hard-biased law factorizes over d and N
        let span = (cfg.d_max - cfg.d_min + 1) as f64;
        let wd: Vec<f64> = ds
            .clone()
            .map(|d| ((d - cfg.d_min + 1) as f64 / span).powf(cfg.alpha_d))
            .collect();
        let wn: Vec<f64> = ns
            .clone()
            .map(|n| (cfg.n_min as f64 / n as f64).powf(cfg.alpha_n))
            .collect();
        (
            cfg.d_min + weighted(&wd, rng),
            cfg.n_min + weighted(&wn, rng),
        )
    } else {
        (rng.random_range(ds), rng.random_range(ns))
    }
}

fn log_uniform(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    rng.random_range(range.0..range.1).exp()
}

/// Prior factor of a uniformly chosen allowed family.
pub fn sample_prior_factor(d: usize, cfg: &SimulatorConfig, rng: &mut impl Rng) -> FactorSpec {
    let ty = *cfg.prior_types.choose(rng).expect("validated non-empty");
    let mu: Vec<f64> = (0..d)
        .map(|_| PRIOR_LOCATION_SCALE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let theta = match ty {
        FactorType::DiagGaussian => Theta::DiagGaussian {
            mu,
            sigma: (0..d)
                .map(|_| log_uniform(DIAG_GAUSSIAN_LOG_SIGMA, rng))
                .collect(),
        },
        FactorType::FullrankGaussian => {
            let m: Vec<f64> = (0..d * d)
                .map(|_| FULLRANK_M_SCALE * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut p = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..=i {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += m[i * d + k] * m[j * d + k];
                    }
                    let v = s / d as f64 + if i == j { FULLRANK_RIDGE } else { 0.0 };
                    p[i][j] = v;
                    p[j][i] = v;
                }
            }
            Theta::FullrankGaussian { mu, precision: p }
        }
        FactorType::DiagStudentT => Theta::DiagStudentT {
            mu,
            sigma: (0..d)
                .map(|_| log_uniform(STUDENT_T_LOG_SIGMA, rng))
                .collect(),
            nu: rng.random_range(DOF_RANGE.0..DOF_RANGE.1),
        },
        FactorType::DiagLaplace => Theta::DiagLaplace {
            mu,
            scale: (0..d)
                .map(|_| log_uniform(LAPLACE_LOG_SCALE, rng))
                .collect(),
        },
        _ => unreachable!("validated prior family"),
    };
    FactorSpec::prior(theta)
}

/// Likelihood type of every site.
pub fn sample_likelihood_types(
    n: usize,
    cfg: &SimulatorConfig,
    rng: &mut impl Rng,
) -> Vec<FactorType> {
    let types = &cfg.likelihood_types;
    let k_max = types.len().min(n);
    if k_max < 2 || rng.random::<f64>() < cfg.homogeneous_prob {
        let t = *types.choose(rng).expect("validated non-empty");
        return vec![t; n];
    }
    let ks: Vec<f64> = (2..=k_max).map(|k| (-((k - 2) as f64)).exp()).collect();
    let k = 2 + weighted(&ks, rng);
    let chosen: Vec<FactorType> = types.choose_multiple(rng, k).copied().collect();
    let gamma = Gamma::new(cfg.dirichlet_conc, 1.0).expect("positive concentration");
    let mut pi: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    if pi.iter().sum::<f64>() <= 0.0 {
        pi = vec![1.0; k];
    }
    let mut out = chosen.clone();
    let idx = WeightedIndex::new(&pi).expect("non-degenerate weights");
    for _ in k..n {
        out.push(chosen[idx.sample(rng)]);
    }
    out.shuffle(rng);
    out
}

/// `N×d` covariate rows. Entry standard deviation is `base_scale_coeff/√d`
/// for the iid family.
pub fn sample_design_matrix(
    n: usize,
    d: usize,
    cfg: &SimulatorConfig,
    rng: &mut impl Rng,
) -> (DesignFamily, Vec<Vec<f64>>) {
    let family = DesignFamily::ALL[weighted(&cfg.design_family_probs, rng)];
    (
        family,
        sample_design_rows(family, n, d, cfg.base_scale_coeff, rng),
    )
}

pub fn sample_design_rows(
    family: DesignFamily,
    n: usize,
    d: usize,
    base_scale_coeff: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let base = base_scale_coeff / (d as f64).sqrt();
    // row = base · R · diag(√λ) · ε
    let (sd, rot): (Vec<f64>, Option<DMatrix<f64>>) = match family {
        DesignFamily::Iid => (vec![1.0; d], None),
        DesignFamily::DiagScale => (
            (0..d)
                .map(|_| log_uniform(log_range(), rng).sqrt())
                .collect(),
            None,
        ),
        DesignFamily::Correlated | DesignFamily::StudentT => {
            let sd = (0..d)
                .map(|_| log_uniform(log_range(), rng).sqrt())
                .collect();
            (sd, Some(haar_rotation(d, rng)))
        }
    };
    let chi = ChiSquared::new(DESIGN_T_DOF).expect("positive dof");
    (0..n)
        .map(|_| {
            let e: Vec<f64> = sd
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut row = match &rot {
                None => e,
                Some(q) => (0..d)
                    .map(|i| (0..d).map(|j| q[(i, j)] * e[j]).sum())
                    .collect(),
            };
            let w = if family == DesignFamily::StudentT {
                (DESIGN_T_DOF / chi.sample(rng)).sqrt()
            } else {
                1.0
            };
            row.iter_mut().for_each(|v| *v *= base * w);
            row
        })
        .collect()
}

fn log_range() -> (f64, f64) {
    (SPECTRUM_RANGE.0.ln(), SPECTRUM_RANGE.1.ln())
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`.
fn haar_rotation(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// One task with fixed sizes.
pub fn simulate_task_sized(
    cfg: &SimulatorConfig,
    d: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<TaskInstance> {
    let prior = sample_prior_factor(d, cfg, rng);
    let z = sample_prior(&prior.theta, rng)?;
    let types = sample_likelihood_types(n, cfg, rng);
    let needs_design = types.iter().any(|t| t.is_regression());
    let rows = if needs_design {
        sample_design_matrix(n, d, cfg, rng).1
    } else {
        Vec::new()
    };
    // noise scales are shared by all sites of one type within a task
    let gaussian_sigma = log_uniform(NOISE_LOG_SIGMA, rng);
    let lin_sigma = log_uniform(NOISE_LOG_SIGMA, rng);
    let t_sigma = log_uniform(NOISE_LOG_SIGMA, rng);
    let t_nu = rng.random_range(DOF_RANGE.0..DOF_RANGE.1);
    let mut likelihoods = Vec::with_capacity(n);
    for (i, ty) in types.iter().enumerate() {
        let theta = match ty {
            FactorType::Gaussian => Theta::Gaussian {
                sigma: gaussian_sigma,
            },
            FactorType::LinGaussian => Theta::LinGaussian { sigma: lin_sigma },
            FactorType::LinStudentT => Theta::LinStudentT {
                sigma: t_sigma,
                nu: t_nu,
            },
            FactorType::BernoulliLogit => Theta::BernoulliLogit {},
            FactorType::BinomialLogit => Theta::BinomialLogit {
                trials: rng.random_range(TRIALS_RANGE.0..=TRIALS_RANGE.1),
            },
            _ => unreachable!("validated likelihood family"),
        };
        let x = ty.is_regression().then(|| rows[i].clone());
        let y = sample_observation(&theta, x.as_deref(), &z, rng)?;
        likelihoods.push(FactorSpec::likelihood(theta, x, y));
    }
    TaskInstance::new(d, prior, likelihoods, Some(z))
}

/// One task including its sizes.
pub fn simulate_task(cfg: &SimulatorConfig, rng: &mut impl Rng) -> Result<TaskInstance> {
    let (d, n) = sample_task_sizes(cfg, rng);
    simulate_task_sized(cfg, d, n, rng)
}

/// `b` tasks sharing one `(d, N)`, each drawn from its own stream labelled
/// by `labels` and its index, so the result does not depend on scheduling.
pub fn simulate_micro_batch(
    cfg: &SimulatorConfig,
    seed: u64,
    labels: &[u64],
    b: usize,
) -> Result<Vec<TaskInstance>> {
    let mut size_labels = labels.to_vec();
    size_labels.push(purpose::TASK);
    let (d, n) = sample_task_sizes(cfg, &mut stream(seed, &size_labels));
    (0..b)
        .into_par_iter()
        .map(|t| {
            let mut l = labels.to_vec();
            l.extend([t as u64, purpose::TASK]);
            simulate_task_sized(cfg, d, n, &mut stream(seed, &l))
        })
        .collect()
}
