use rand::Rng;
use serde::Serialize;

use super::batch_loss_gradient;
use crate::error::{AfinError, Result};
use crate::factor_model::TaskInstance;
use crate::network::{Afin, DecoderVariant};
use crate::params::ParameterStore;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub probes: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Negative control: perturb the analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            probes: 200,
            step: 1e-5,
            floor: 1e-6,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Probe>,
    pub probes: Vec<Probe>,
}

/// Central differences of the batch loss against the analytic gradient on
/// `probes` parameter entries drawn uniformly from the whole registry.
/// Relative error is `|a − f| / max(|a|, |f|, floor)`.
pub fn finite_difference_check(
    net: &Afin,
    store: &ParameterStore,
    tasks: &[TaskInstance],
    variant: DecoderVariant,
    opts: &GradcheckOptions,
    rng: &mut impl Rng,
) -> Result<GradcheckReport> {
    let (_, grads) = batch_loss_gradient(net, store, tasks, variant, 1.0)?;
    let analytic = grads.flatten();
    let mut work = store.clone();
    let loss_at = |s: &ParameterStore| batch_loss_gradient_value(net, s, tasks, variant);
    let mut probes = Vec::with_capacity(opts.probes);
    for _ in 0..opts.probes {
        let flat = rng.random_range(0..analytic.len());
        let (pid, k) = store.locate(flat).expect("index in range");
        let orig = store.value(pid).data()[k];
        work.value_mut(pid).data_mut()[k] = orig + opts.step;
        let up = loss_at(&work)?;
        work.value_mut(pid).data_mut()[k] = orig - opts.step;
        let down = loss_at(&work)?;
        work.value_mut(pid).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let mut a = analytic[flat];
        if opts.corrupt {
            a = a * 1.5 + 1e-2;
        }
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        probes.push(Probe {
            name: store.info(pid).name.clone(),
            index: k,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let worst = probes
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .cloned();
    Ok(GradcheckReport {
        max_rel_err: worst.as_ref().map_or(0.0, |p| p.rel_err),
        worst,
        probes,
    })
}

fn batch_loss_gradient_value(
    net: &Afin,
    store: &ParameterStore,
    tasks: &[TaskInstance],
    variant: DecoderVariant,
) -> Result<f64> {
    use crate::tape::Graph;
    let mut total = 0.0;
    for task in tasks {
        let z = task
            .z
            .as_ref()
            .ok_or_else(|| AfinError::InvalidTask("task carries no latent draw".into()))?;
        let g = Graph::inference(store);
        let fwd = net.forward(&g, task)?;
        total -= net.log_prob(&g, &fwd, variant, z)?.item() / task.d as f64;
    }
    Ok(total / tasks.len() as f64)
}
