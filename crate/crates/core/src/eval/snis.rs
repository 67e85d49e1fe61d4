use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{AfinError, Result};
use crate::factor_model::{GaussianDistribution, GaussianSampler, TaskInstance};
use crate::network::{Afin, DecoderVariant};
use crate::params::ParameterStore;
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Something that draws samples together with their log density.
pub trait Proposal {
    fn dim(&self) -> usize;
    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<(Vec<Vec<f64>>, Vec<f64>)>;
}

impl Proposal for GaussianSampler {
    fn dim(&self) -> usize {
        GaussianSampler::dim(self)
    }

    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let d = GaussianSampler::dim(self);
        let mut zs = Vec::with_capacity(s);
        let mut lq = Vec::with_capacity(s);
        for _ in 0..s {
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let z = self.transform(&eps);
            lq.push(self.log_density(&z));
            zs.push(z);
        }
        Ok((zs, lq))
    }
}

/// The network's posterior approximation for one task.
pub struct AfinProposal<'a> {
    net: &'a Afin,
    store: &'a ParameterStore,
    task: &'a TaskInstance,
    variant: DecoderVariant,
    gaussian: GaussianDistribution,
}

impl<'a> AfinProposal<'a> {
    pub fn new(
        net: &'a Afin,
        store: &'a ParameterStore,
        task: &'a TaskInstance,
        variant: DecoderVariant,
    ) -> Result<Self> {
        if variant == DecoderVariant::Flow && net.flow().is_none() {
            return Err(AfinError::Config("model has no flow decoder".into()));
        }
        let gaussian = net.posterior(store, task)?;
        Ok(Self {
            net,
            store,
            task,
            variant,
            gaussian,
        })
    }

    /// Mean and precision of the Gaussian head.
    pub fn gaussian(&self) -> &GaussianDistribution {
        &self.gaussian
    }
}

impl Proposal for AfinProposal<'_> {
    fn dim(&self) -> usize {
        self.task.d
    }

    fn draw(&self, s: usize, rng: &mut dyn RngCore) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        match self.variant {
            DecoderVariant::Gaussian => self.gaussian.sampler()?.draw(s, rng),
            DecoderVariant::Flow => {
                let d = self.task.d;
                let eps = Tensor::from_vec(
                    s,
                    d,
                    (0..s * d).map(|_| rng.sample(StandardNormal)).collect(),
                );
                let g = Graph::inference(self.store);
                let fwd = self.net.forward(&g, self.task)?;
                let st = self.net.decode_flow(&g, &fwd)?;
                let (z, lq) = self
                    .net
                    .flow()
                    .expect("checked in new")
                    .sample(&g, &st, &eps);
                Ok(((0..s).map(|r| z.row(r).to_vec()).collect(), lq))
            }
        }
    }
}

/// Samples with self-normalized importance weights.
#[derive(Debug, Clone)]
pub struct WeightedSampleSet {
    pub samples: Vec<Vec<f64>>,
    pub log_raw_weights: Vec<f64>,
    /// Normalized weights, summing to one.
    pub weights: Vec<f64>,
    /// `log w̄`, kept separately so entropies avoid `log(exp(·))` round trips.
    pub log_weights: Vec<f64>,
}

impl WeightedSampleSet {
    /// Normalizes `log_raw_weights` by log-sum-exp. Fails when no weight is
    /// positive and finite, or any is `+∞`/NaN.
    pub fn new(samples: Vec<Vec<f64>>, log_raw_weights: Vec<f64>) -> Result<Self> {
        if samples.len() != log_raw_weights.len() {
            return Err(AfinError::Shape(format!(
                "{} samples but {} weights",
                samples.len(),
                log_raw_weights.len()
            )));
        }
        if let Some(bad) = log_raw_weights
            .iter()
            .find(|w| w.is_nan() || **w == f64::INFINITY)
        {
            return Err(AfinError::NonFinite(format!("log importance weight {bad}")));
        }
        let max = log_raw_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(AfinError::NonFinite(
                "degenerate proposal: every importance weight is zero".into(),
            ));
        }
        let shifted: Vec<f64> = log_raw_weights.iter().map(|w| w - max).collect();
        let unnorm: Vec<f64> = shifted.iter().map(|v| v.exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let log_total = total.ln();
        Ok(Self {
            weights: unnorm.iter().map(|w| w / total).collect(),
            log_weights: shifted.iter().map(|v| v - log_total).collect(),
            samples,
            log_raw_weights,
        })
    }

    /// Equal weights on every sample.
    pub fn uniform(samples: Vec<Vec<f64>>) -> Result<Self> {
        let n = samples.len();
        Self::new(samples, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Kish effective sample size `1 / Σ w̄²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Draws `s` samples from `q` and weights them by `p̃ / q`.
pub fn snis(
    q: &dyn Proposal,
    log_target: &(dyn Fn(&[f64]) -> f64 + Sync),
    s: usize,
    rng: &mut dyn RngCore,
) -> Result<WeightedSampleSet> {
    if s < 2 {
        return Err(AfinError::Config("SNIS needs at least two samples".into()));
    }
    let (samples, log_q) = q.draw(s, rng)?;
    let log_raw = samples
        .iter()
        .zip(&log_q)
        .map(|(z, lq)| {
            let lp = log_target(z);
            // a sample outside the target support has weight zero
            if lp == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                lp - lq
            }
        })
        .collect();
    WeightedSampleSet::new(samples, log_raw)
}
