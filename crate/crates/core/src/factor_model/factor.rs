use serde::{Deserialize, Serialize};

use crate::error::{AfinError, Result};

/// Factor family. The role (prior or likelihood) is part of the type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorType {
    DiagGaussian,
    FullrankGaussian,
    DiagStudentT,
    DiagLaplace,
    Gaussian,
    LinGaussian,
    BernoulliLogit,
    BinomialLogit,
    LinStudentT,
}

impl FactorType {
    pub const ALL: [FactorType; 9] = [
        FactorType::DiagGaussian,
        FactorType::FullrankGaussian,
        FactorType::DiagStudentT,
        FactorType::DiagLaplace,
        FactorType::Gaussian,
        FactorType::LinGaussian,
        FactorType::BernoulliLogit,
        FactorType::BinomialLogit,
        FactorType::LinStudentT,
    ];

    pub const PRIORS: [FactorType; 4] = [
        FactorType::DiagGaussian,
        FactorType::FullrankGaussian,
        FactorType::DiagStudentT,
        FactorType::DiagLaplace,
    ];

    pub const LIKELIHOODS: [FactorType; 5] = [
        FactorType::Gaussian,
        FactorType::LinGaussian,
        FactorType::BernoulliLogit,
        FactorType::BinomialLogit,
        FactorType::LinStudentT,
    ];

    pub fn is_prior(self) -> bool {
        Self::PRIORS.contains(&self)
    }

    /// Likelihoods that take a covariate row.
    pub fn is_regression(self) -> bool {
        matches!(
            self,
            FactorType::LinGaussian
                | FactorType::BernoulliLogit
                | FactorType::BinomialLogit
                | FactorType::LinStudentT
        )
    }

    /// Position in [`FactorType::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            FactorType::DiagGaussian => "diag_gaussian",
            FactorType::FullrankGaussian => "fullrank_gaussian",
            FactorType::DiagStudentT => "diag_student_t",
            FactorType::DiagLaplace => "diag_laplace",
            FactorType::Gaussian => "gaussian",
            FactorType::LinGaussian => "lin_gaussian",
            FactorType::BernoulliLogit => "bernoulli_logit",
            FactorType::BinomialLogit => "binomial_logit",
            FactorType::LinStudentT => "lin_student_t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| AfinError::InvalidFactor(format!("unknown factor type {s:?}")))
    }
}

impl std::fmt::Display for FactorType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Type-specific parameters. Serialized as `{"type": .., "theta": {..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "theta", rename_all = "snake_case")]
pub enum Theta {
    DiagGaussian {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
    FullrankGaussian {
        mu: Vec<f64>,
        precision: Vec<Vec<f64>>,
    },
    DiagStudentT {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        nu: f64,
    },
    DiagLaplace {
        mu: Vec<f64>,
        scale: Vec<f64>,
    },
    /// `y = z + ε` with isotropic noise scale `sigma`.
    Gaussian {
        sigma: f64,
    },
    LinGaussian {
        sigma: f64,
    },
    BernoulliLogit {},
    BinomialLogit {
        trials: u32,
    },
    LinStudentT {
        sigma: f64,
        nu: f64,
    },
}

impl Theta {
    pub fn factor_type(&self) -> FactorType {
        match self {
            Theta::DiagGaussian { .. } => FactorType::DiagGaussian,
            Theta::FullrankGaussian { .. } => FactorType::FullrankGaussian,
            Theta::DiagStudentT { .. } => FactorType::DiagStudentT,
            Theta::DiagLaplace { .. } => FactorType::DiagLaplace,
            Theta::Gaussian { .. } => FactorType::Gaussian,
            Theta::LinGaussian { .. } => FactorType::LinGaussian,
            Theta::BernoulliLogit {} => FactorType::BernoulliLogit,
            Theta::BinomialLogit { .. } => FactorType::BinomialLogit,
            Theta::LinStudentT { .. } => FactorType::LinStudentT,
        }
    }
}

/// Observed value of a likelihood factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Observation {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Observation::Scalar(v) => Some(*v),
            Observation::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Observation::Scalar(_) => None,
            Observation::Vector(v) => Some(v),
        }
    }
}

/// One typed factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    #[serde(flatten)]
    pub theta: Theta,
    #[serde(rename = "x", default, skip_serializing_if = "Option::is_none")]
    pub covariate: Option<Vec<f64>>,
    #[serde(rename = "y", default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
}

impl FactorSpec {
    pub fn prior(theta: Theta) -> Self {
        Self {
            theta,
            covariate: None,
            observation: None,
        }
    }

    pub fn likelihood(theta: Theta, covariate: Option<Vec<f64>>, observation: Observation) -> Self {
        Self {
            theta,
            covariate,
            observation: Some(observation),
        }
    }

    pub fn factor_type(&self) -> FactorType {
        self.theta.factor_type()
    }

    pub(crate) fn x(&self) -> Result<&[f64]> {
        self.covariate.as_deref().ok_or_else(|| {
            AfinError::InvalidFactor(format!(
                "{} factor needs a covariate row",
                self.factor_type()
            ))
        })
    }

    pub(crate) fn y_scalar(&self) -> Result<f64> {
        self.observation
            .as_ref()
            .and_then(Observation::scalar)
            .ok_or_else(|| {
                AfinError::InvalidFactor(format!(
                    "{} factor needs a scalar observation",
                    self.factor_type()
                ))
            })
    }

    pub(crate) fn y_vector(&self) -> Result<&[f64]> {
        self.observation
            .as_ref()
            .and_then(Observation::vector)
            .ok_or_else(|| {
                AfinError::InvalidFactor(format!(
                    "{} factor needs a vector observation",
                    self.factor_type()
                ))
            })
    }

    /// Checks shapes against `d`, parameter positivity and observation
    /// support.
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |msg: String| {
            Err(AfinError::InvalidFactor(format!(
                "{}: {msg}",
                self.factor_type()
            )))
        };
        let check_len = |name: &str, v: &[f64]| {
            if v.len() != d {
                return bad(format!("{name} has length {} but d = {d}", v.len()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return bad(format!("{name} is not finite"));
            }
            Ok(())
        };
        let check_pos = |name: &str, v: &[f64]| {
            if v.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
                return bad(format!("{name} must be strictly positive"));
            }
            Ok(())
        };
        let ty = self.factor_type();
        if ty.is_prior() {
            if self.observation.is_some() || self.covariate.is_some() {
                return bad("prior factors take no observation or covariate".into());
            }
        } else if self.observation.is_none() {
            return bad("likelihood factor without observation".into());
        }
        if let Some(x) = &self.covariate {
            if !ty.is_regression() {
                return bad("covariate given to a non-regression factor".into());
            }
            check_len("x", x)?;
        } else if ty.is_regression() {
            return bad("missing covariate row".into());
        }
        match &self.theta {
            Theta::DiagGaussian { mu, sigma } => {
                check_len("mu", mu)?;
                check_len("sigma", sigma)?;
                check_pos("sigma", sigma)?;
            }
            Theta::FullrankGaussian { mu, precision } => {
                check_len("mu", mu)?;
                if precision.len() != d || precision.iter().any(|r| r.len() != d) {
                    return bad(format!("precision must be {d}x{d}"));
                }
                for i in 0..d {
                    for j in 0..i {
                        if precision[i][j] != precision[j][i] {
                            return bad("precision is not symmetric".into());
                        }
                    }
                }
                let m = nalgebra::DMatrix::from_fn(d, d, |i, j| precision[i][j]);
                if !m.iter().all(|v| v.is_finite()) || m.cholesky().is_none() {
                    return bad("precision is not positive definite".into());
                }
            }
            Theta::DiagStudentT { mu, sigma, nu } => {
                check_len("mu", mu)?;
                check_len("sigma", sigma)?;
                check_pos("sigma", sigma)?;
                check_pos("nu", &[*nu])?;
            }
            Theta::DiagLaplace { mu, scale } => {
                check_len("mu", mu)?;
                check_len("scale", scale)?;
                check_pos("scale", scale)?;
            }
            Theta::Gaussian { sigma } => {
                check_pos("sigma", &[*sigma])?;
                check_len("y", self.y_vector()?)?;
            }
            Theta::LinGaussian { sigma } => {
                check_pos("sigma", &[*sigma])?;
                if !self.y_scalar()?.is_finite() {
                    return bad("y is not finite".into());
                }
            }
            Theta::LinStudentT { sigma, nu } => {
                check_pos("sigma", &[*sigma])?;
                check_pos("nu", &[*nu])?;
                if !self.y_scalar()?.is_finite() {
                    return bad("y is not finite".into());
                }
            }
            Theta::BernoulliLogit {} => {
                let y = self.y_scalar()?;
                if y != 0.0 && y != 1.0 {
                    return bad(format!("y = {y} is not in {{0, 1}}"));
                }
            }
            Theta::BinomialLogit { trials } => {
                if *trials < 1 {
                    return bad("trials must be at least 1".into());
                }
                let y = self.y_scalar()?;
                if y.fract() != 0.0 || y < 0.0 || y > f64::from(*trials) {
                    return bad(format!("y = {y} outside 0..={trials}"));
                }
            }
        }
        Ok(())
    }
}

/// A complete inference problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskWire")]
pub struct TaskInstance {
    pub d: usize,
    pub prior: FactorSpec,
    pub likelihoods: Vec<FactorSpec>,
    /// Ground-truth latent for simulated tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct TaskWire {
    d: usize,
    prior: FactorSpec,
    likelihoods: Vec<FactorSpec>,
    #[serde(default)]
    z: Option<Vec<f64>>,
}

impl TryFrom<TaskWire> for TaskInstance {
    type Error = AfinError;

    fn try_from(w: TaskWire) -> Result<Self> {
        TaskInstance::new(w.d, w.prior, w.likelihoods, w.z)
    }
}

impl TaskInstance {
    pub fn new(
        d: usize,
        prior: FactorSpec,
        likelihoods: Vec<FactorSpec>,
        z: Option<Vec<f64>>,
    ) -> Result<Self> {
        let task = Self {
            d,
            prior,
            likelihoods,
            z,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(AfinError::InvalidTask("d must be positive".into()));
        }
        if !self.prior.factor_type().is_prior() {
            return Err(AfinError::InvalidTask(format!(
                "{} cannot be a prior",
                self.prior.factor_type()
            )));
        }
        self.prior.validate(self.d)?;
        if self.likelihoods.is_empty() {
            return Err(AfinError::InvalidTask(
                "at least one likelihood factor is required".into(),
            ));
        }
        for (n, f) in self.likelihoods.iter().enumerate() {
            if f.factor_type().is_prior() {
                return Err(AfinError::InvalidTask(format!(
                    "likelihood {n} has prior type {}",
                    f.factor_type()
                )));
            }
            f.validate(self.d)
                .map_err(|e| AfinError::InvalidTask(format!("likelihood {n}: {e}")))?;
        }
        if let Some(z) = &self.z {
            if z.len() != self.d {
                return Err(AfinError::InvalidTask(format!(
                    "z has length {} but d = {}",
                    z.len(),
                    self.d
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.likelihoods.len()
    }

    /// Every factor, prior first.
    pub fn factors(&self) -> impl Iterator<Item = &FactorSpec> {
        std::iter::once(&self.prior).chain(&self.likelihoods)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("task serialization cannot fail")
    }

    /// The same task with latent coordinates relabelled: coordinate `i` of
    /// the result is coordinate `perm[i]` of `self`.
    pub fn permute_coordinates(&self, perm: &[usize]) -> Self {
        let p = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let permute_factor = |f: &FactorSpec| {
            let theta = match &f.theta {
                Theta::DiagGaussian { mu, sigma } => Theta::DiagGaussian {
                    mu: p(mu),
                    sigma: p(sigma),
                },
                Theta::FullrankGaussian { mu, precision } => Theta::FullrankGaussian {
                    mu: p(mu),
                    precision: perm
                        .iter()
                        .map(|&i| perm.iter().map(|&j| precision[i][j]).collect())
                        .collect(),
                },
                Theta::DiagStudentT { mu, sigma, nu } => Theta::DiagStudentT {
                    mu: p(mu),
                    sigma: p(sigma),
                    nu: *nu,
                },
                Theta::DiagLaplace { mu, scale } => Theta::DiagLaplace {
                    mu: p(mu),
                    scale: p(scale),
                },
                other => other.clone(),
            };
            let observation = match &f.observation {
                Some(Observation::Vector(y)) => Some(Observation::Vector(p(y))),
                other => other.clone(),
            };
            FactorSpec {
                theta,
                covariate: f.covariate.as_deref().map(p),
                observation,
            }
        };
        Self {
            d: self.d,
            prior: permute_factor(&self.prior),
            likelihoods: self.likelihoods.iter().map(permute_factor).collect(),
            z: self.z.as_deref().map(p),
        }
    }
}
