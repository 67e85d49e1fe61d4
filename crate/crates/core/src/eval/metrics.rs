use rand::seq::index;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use super::snis::WeightedSampleSet;
use crate::error::{AfinError, Result};
use crate::factor_model::GaussianDistribution;
use crate::tensor::Tensor;

/// Mean vector and covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

impl Moments {
    pub fn of_gaussian(g: &GaussianDistribution) -> Result<Self> {
        Ok(Self {
            mean: g.mean.clone(),
            cov: g.covariance()?,
        })
    }
}

fn check_dims(samples: &[Vec<f64>]) -> Result<usize> {
    let d = samples
        .first()
        .map(Vec::len)
        .ok_or_else(|| AfinError::Shape("no samples".into()))?;
    if samples.iter().any(|z| z.len() != d) {
        return Err(AfinError::Shape("samples of different lengths".into()));
    }
    Ok(d)
}

/// Unweighted mean and the `1/(S−1)` sample covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<Moments> {
    let d = check_dims(samples)?;
    let s = samples.len();
    if s < 2 {
        return Err(AfinError::Shape(
            "sample covariance needs two samples".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for z in samples {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let mut cov = accumulate_cov(samples.iter().map(|z| (1.0, z.as_slice())), &mean);
    cov.data_mut().iter_mut().for_each(|c| *c /= (s - 1) as f64);
    Ok(Moments { mean, cov })
}

/// `μ̂ = Σ w̄ z`, `Σ̂ = Σ w̄ (z − μ̂)(z − μ̂)ᵀ` (no small-sample correction).
pub fn weighted_moments(w: &WeightedSampleSet) -> Result<Moments> {
    let d = check_dims(&w.samples)?;
    let mut mean = vec![0.0; d];
    for (z, &wt) in w.samples.iter().zip(&w.weights) {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += wt * v;
        }
    }
    let cov = accumulate_cov(
        w.weights
            .iter()
            .copied()
            .zip(w.samples.iter().map(Vec::as_slice)),
        &mean,
    );
    Ok(Moments { mean, cov })
}

fn accumulate_cov<'a>(items: impl Iterator<Item = (f64, &'a [f64])>, mean: &[f64]) -> Tensor {
    let d = mean.len();
    let mut cov = Tensor::zeros(d, d);
    let mut r = vec![0.0; d];
    for (wt, z) in items {
        if wt == 0.0 {
            continue;
        }
        for i in 0..d {
            r[i] = z[i] - mean[i];
        }
        let c = cov.data_mut();
        for i in 0..d {
            for j in 0..=i {
                c[i * d + j] += wt * r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = cov.get(i, j);
            cov.set(j, i, v);
        }
    }
    cov
}

/// `‖μ_a − μ_b‖₂`.
pub fn metric_m1(a: &Moments, b: &Moments) -> f64 {
    a.mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖Σ_a − Σ_b‖_F`.
pub fn metric_m2(a: &Moments, b: &Moments) -> f64 {
    a.cov
        .data()
        .iter()
        .zip(b.cov.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Unit projection directions for sliced Wasserstein distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub dirs: Vec<Vec<f64>>,
}

impl Directions {
    pub const DEFAULT_COUNT: usize = 128;

    /// Uniform on the sphere (normalized Gaussians).
    pub fn random(d: usize, r: usize, rng: &mut dyn RngCore) -> Self {
        let dirs = (0..r)
            .map(|_| loop {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break v.into_iter().map(|x| x / n).collect();
                }
            })
            .collect();
        Self { dirs }
    }

    /// The single direction `e_k`.
    pub fn axis(d: usize, k: usize) -> Self {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        Self { dirs: vec![e] }
    }

    fn project(&self, dir: usize, samples: &[Vec<f64>]) -> Vec<f64> {
        let u = &self.dirs[dir];
        samples
            .iter()
            .map(|z| z.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Sliced W2 between equal-size unweighted sample sets: root of the mean
/// over directions of the mean squared difference of sorted projections.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], dirs: &Directions) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AfinError::Shape(format!(
            "sample counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() || dirs.dirs.is_empty() {
        return Err(AfinError::Shape("empty sample set or direction set".into()));
    }
    let mut total = 0.0;
    for r in 0..dirs.dirs.len() {
        let mut pa = dirs.project(r, a);
        let mut pb = dirs.project(r, b);
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        total += pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
    }
    Ok((total / dirs.dirs.len() as f64).sqrt())
}

/// Draws `n` of `samples` without replacement, keeping their order.
pub fn subsample(samples: &[Vec<f64>], n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
    if n >= samples.len() {
        return samples.to_vec();
    }
    let mut idx = index::sample(rng, samples.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// [`sliced_w2`] after subsampling the larger set to the size of the
/// smaller.
pub fn sliced_w2_subsampled(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    dirs: &Directions,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let n = a.len().min(b.len());
    sliced_w2(&subsample(a, n, rng), &subsample(b, n, rng), dirs)
}

/// Squared W2 between two weighted 1-D empirical laws by matching their
/// quantile functions. Weights must each sum to one.
fn weighted_w2_sq(a: &mut [(f64, f64)], b: &mut [(f64, f64)]) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let diff = a[i].0 - b[j].0;
        if ra < rb {
            total += ra * diff * diff;
            rb -= ra;
            i += 1;
            ra = a.get(i).map_or(0.0, |p| p.1);
        } else if rb < ra {
            total += rb * diff * diff;
            ra -= rb;
            j += 1;
            rb = b.get(j).map_or(0.0, |p| p.1);
        } else {
            total += ra * diff * diff;
            i += 1;
            j += 1;
            ra = a.get(i).map_or(0.0, |p| p.1);
            rb = b.get(j).map_or(0.0, |p| p.1);
        }
    }
    total
}

/// Sliced W2 between two weighted sample sets via weighted 1-D quantile
/// matching. Counts may differ.
pub fn sliced_w2_weighted(
    a: &WeightedSampleSet,
    b: &WeightedSampleSet,
    dirs: &Directions,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() || dirs.dirs.is_empty() {
        return Err(AfinError::Shape("empty sample set or direction set".into()));
    }
    let mut total = 0.0;
    for r in 0..dirs.dirs.len() {
        let mut pa: Vec<(f64, f64)> = dirs
            .project(r, &a.samples)
            .into_iter()
            .zip(a.weights.iter().copied())
            .collect();
        let mut pb: Vec<(f64, f64)> = dirs
            .project(r, &b.samples)
            .into_iter()
            .zip(b.weights.iter().copied())
            .collect();
        total += weighted_w2_sq(&mut pa, &mut pb);
    }
    Ok((total / dirs.dirs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightDiagnostics {
    pub max_weight: f64,
    /// Weight entropy over `log S`; NaN when `S = 1`.
    pub entropy_ratio: f64,
    /// `E_w̄[−log p̃] − mean_ref[−log p̃]`.
    pub energy_gap: f64,
}

pub fn weight_diagnostics(
    w: &WeightedSampleSet,
    log_target: &dyn Fn(&[f64]) -> f64,
    reference: &[Vec<f64>],
) -> WeightDiagnostics {
    let s = w.len();
    let max_weight = w.weights.iter().copied().fold(0.0, f64::max);
    let entropy_ratio = if s < 2 {
        f64::NAN
    } else {
        // H / log S = 1 − KL(w̄ ‖ uniform) / log S
        let log_s = (s as f64).ln();
        let kl: f64 = w
            .weights
            .iter()
            .zip(&w.log_weights)
            .filter(|(wt, _)| **wt > 0.0)
            .map(|(wt, lw)| wt * (lw + log_s))
            .sum();
        (1.0 - kl / log_s).clamp(0.0, 1.0)
    };
    let approx: f64 = w
        .samples
        .iter()
        .zip(&w.weights)
        .filter(|(_, wt)| **wt > 0.0)
        .map(|(z, wt)| -wt * log_target(z))
        .sum();
    let reference_energy = if reference.is_empty() {
        f64::NAN
    } else {
        reference.iter().map(|z| -log_target(z)).sum::<f64>() / reference.len() as f64
    };
    WeightDiagnostics {
        max_weight,
        entropy_ratio,
        energy_gap: approx - reference_energy,
    }
}
