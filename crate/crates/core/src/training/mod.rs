//! Forward-KL training: `−mean_t d_t⁻¹ log q(z_t)` over simulated tasks,
//! AdamW with warmup and cosine decay, gradient accumulation and EMA
//! weights.

mod gradcheck;
mod optimizer;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype};
use crate::error::{AfinError, Result};
use crate::factor_model::TaskInstance;
use crate::network::{Afin, DecoderVariant};
use crate::params::{GradBuffer, ParameterStore};
use crate::simulator::{simulate_micro_batch, SimulatorConfig};
use crate::tape::Graph;
use crate::tensor::Tensor;

pub use gradcheck::{finite_difference_check, GradcheckOptions, GradcheckReport, Probe};
pub use optimizer::{ema_update, AdamW, AdamWConfig, CosineSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Tasks per micro-batch `B`.
    pub micro_batch: usize,
    /// Micro-batches per update `K`.
    pub accumulation: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub adamw: AdamWConfig,
    pub ema_decay: f64,
    pub seed: u64,
    pub variant: DecoderVariant,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            micro_batch: 32,
            accumulation: 4,
            peak_lr: 2e-4,
            warmup_frac: 0.01,
            min_lr_ratio: 0.0,
            adamw: AdamWConfig::default(),
            ema_decay: 0.999,
            seed: 0,
            variant: DecoderVariant::Gaussian,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(AfinError::Config(
                "micro_batch and accumulation must be positive".into(),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(AfinError::Config("peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(AfinError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(AfinError::Config(
                "warmup_frac and min_lr_ratio must lie in [0, 1]".into(),
            ));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || a.eps <= 0.0
            || a.weight_decay < 0.0
        {
            return Err(AfinError::Config("invalid AdamW hyperparameters".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(
            self.peak_lr,
            self.steps,
            self.warmup_frac,
            self.min_lr_ratio,
        )
    }
}

/// `−d⁻¹ log q(z)` of one task and its gradient times `scale`.
pub fn task_loss_gradient(
    net: &Afin,
    store: &ParameterStore,
    task: &TaskInstance,
    variant: DecoderVariant,
    scale: f64,
) -> Result<(f64, GradBuffer)> {
    let mut grads = GradBuffer::zeros(store);
    let loss = task_loss_gradient_into(net, store, task, variant, scale, &mut grads)?;
    Ok((loss, grads))
}

/// As [`task_loss_gradient`], adding into `grads`. Nothing is added when the
/// loss is not finite.
pub fn task_loss_gradient_into(
    net: &Afin,
    store: &ParameterStore,
    task: &TaskInstance,
    variant: DecoderVariant,
    scale: f64,
    grads: &mut GradBuffer,
) -> Result<f64> {
    let z = task
        .z
        .as_ref()
        .ok_or_else(|| AfinError::InvalidTask("training task carries no latent draw".into()))?;
    let g = Graph::new(store);
    let fwd = net.forward(&g, task)?;
    let lp = net.log_prob(&g, &fwd, variant, z)?;
    let loss = -lp.item() / task.d as f64;
    if loss.is_finite() {
        g.backward_into(&lp, -scale / task.d as f64, grads);
    }
    Ok(loss)
}

/// Tasks summed per work unit; fixed so the reduction order never depends
/// on the thread count.
const REDUCE_CHUNK: usize = 4;

/// Mean loss over `tasks` and `weight ×` its gradient. Fails on the first
/// task with a non-finite loss, naming its index.
pub fn batch_loss_gradient(
    net: &Afin,
    store: &ParameterStore,
    tasks: &[TaskInstance],
    variant: DecoderVariant,
    weight: f64,
) -> Result<(f64, GradBuffer)> {
    if tasks.is_empty() {
        return Err(AfinError::InvalidTask("empty batch".into()));
    }
    let scale = weight / tasks.len() as f64;
    let parts: Vec<Result<(Vec<f64>, GradBuffer)>> = tasks
        .par_chunks(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut losses = Vec::with_capacity(chunk.len());
            let mut acc = GradBuffer::zeros(store);
            for (k, task) in chunk.iter().enumerate() {
                let loss = task_loss_gradient_into(net, store, task, variant, scale, &mut acc)?;
                if !loss.is_finite() {
                    return Err(AfinError::NonFinite(format!(
                        "loss {loss} on task {}",
                        c * REDUCE_CHUNK + k
                    )));
                }
                losses.push(loss);
            }
            Ok((losses, acc))
        })
        .collect();
    let mut total = GradBuffer::zeros(store);
    let mut loss = 0.0;
    for part in parts {
        let (losses, g) = part?;
        loss += losses.iter().sum::<f64>();
        total.add_scaled(&g, 1.0);
    }
    Ok((loss / tasks.len() as f64, total))
}

/// Live weights, EMA shadow, optimizer moments and the update counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub params: ParameterStore,
    pub ema: ParameterStore,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn new(params: ParameterStore, adamw: AdamWConfig) -> Self {
        Self {
            step: 0,
            ema: params.clone(),
            optimizer: AdamW::new(adamw, &params),
            params,
        }
    }

    /// Writes everything needed to resume bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let infos = self.params.infos();
        let mut names = Vec::with_capacity(4 * infos.len() + 1);
        for prefix in SECTIONS {
            for i in infos {
                names.push(format!("{prefix}/{}", i.name));
            }
        }
        let step = Tensor::scalar(self.step as f64);
        let adam_t = Tensor::scalar(self.optimizer.t as f64);
        let mut tensors: Vec<(&str, &Tensor)> = Vec::with_capacity(names.len() + 2);
        let n = infos.len();
        for (k, name) in names.iter().enumerate() {
            let pid = k % n;
            let t = match k / n {
                0 => self.params.value(pid),
                1 => self.ema.value(pid),
                2 => &self.optimizer.m[pid],
                _ => &self.optimizer.v[pid],
            };
            tensors.push((name, t));
        }
        tensors.push(("state/step", &step));
        tensors.push(("state/adam_t", &adam_t));
        checkpoint::save(path, &tensors, Dtype::F64)
    }

    /// Restores into the registry of `template` (names and shapes must
    /// match).
    pub fn load(
        path: impl AsRef<Path>,
        template: &ParameterStore,
        adamw: AdamWConfig,
    ) -> Result<Self> {
        let mut state = Self::new(template.clone(), adamw);
        let mut seen = vec![[false; 4]; template.len()];
        let mut step = None;
        let mut adam_t = None;
        for (name, t) in checkpoint::load(path)? {
            match name.as_str() {
                "state/step" => step = Some(t.item() as u64),
                "state/adam_t" => adam_t = Some(t.item() as u64),
                _ => {
                    let (prefix, pname) = name
                        .split_once('/')
                        .ok_or_else(|| AfinError::Checkpoint(format!("unexpected entry {name}")))?;
                    let section = SECTIONS
                        .iter()
                        .position(|&s| s == prefix)
                        .ok_or_else(|| AfinError::Checkpoint(format!("unexpected entry {name}")))?;
                    let pid = template.id(pname).ok_or_else(|| {
                        AfinError::Checkpoint(format!("unknown parameter {pname}"))
                    })?;
                    let info = template.info(pid);
                    if t.shape() != (info.rows, info.cols) {
                        return Err(AfinError::Checkpoint(format!(
                            "{name}: shape {:?}, expected {:?}",
                            t.shape(),
                            (info.rows, info.cols)
                        )));
                    }
                    match section {
                        0 => state.params.set_value(pid, t)?,
                        1 => state.ema.set_value(pid, t)?,
                        2 => state.optimizer.m[pid] = t,
                        _ => state.optimizer.v[pid] = t,
                    }
                    seen[pid][section] = true;
                }
            }
        }
        if let Some(pid) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
            return Err(AfinError::Checkpoint(format!(
                "missing entries for {}",
                template.info(pid).name
            )));
        }
        state.step = step.ok_or_else(|| AfinError::Checkpoint("missing state/step".into()))?;
        state.optimizer.t =
            adam_t.ok_or_else(|| AfinError::Checkpoint("missing state/adam_t".into()))?;
        Ok(state)
    }
}

const SECTIONS: [&str; 4] = ["param", "ema", "adam_m", "adam_v"];

/// Reads only the EMA (or live) weights of a training checkpoint.
pub fn load_weights(
    path: impl AsRef<Path>,
    template: &ParameterStore,
    ema: bool,
) -> Result<ParameterStore> {
    let state = TrainState::load(path, template, AdamWConfig::default())?;
    Ok(if ema { state.ema } else { state.params })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

pub struct Trainer<'a> {
    pub net: &'a Afin,
    pub sim: SimulatorConfig,
    pub cfg: TrainConfig,
    pub state: TrainState,
    trainable: Vec<bool>,
    decay: Vec<bool>,
    schedule: CosineSchedule,
    /// Where a failing batch is written as JSON lines.
    pub dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: &'a Afin,
        state: TrainState,
        sim: SimulatorConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        sim.validate()?;
        if cfg.variant == DecoderVariant::Flow && net.flow().is_none() {
            return Err(AfinError::Config(
                "flow variant needs a flow decoder".into(),
            ));
        }
        let trainable = net.trainable_mask(&state.params, cfg.variant);
        let decay = state
            .params
            .infos()
            .iter()
            .map(|i| i.name.ends_with(".w"))
            .collect();
        Ok(Self {
            net,
            sim,
            schedule: cfg.schedule(),
            cfg,
            state,
            trainable,
            decay,
            dump_dir: None,
        })
    }

    /// Tasks of micro-batch `micro` at update `step`.
    pub fn micro_batch(&self, step: u64, micro: usize) -> Result<Vec<TaskInstance>> {
        simulate_micro_batch(
            &self.sim,
            self.cfg.seed,
            &[step, micro as u64],
            self.cfg.micro_batch,
        )
    }

    /// Mean loss and accumulated gradient of update `step` at the current
    /// weights.
    pub fn accumulated_gradient(&self, step: u64) -> Result<(f64, GradBuffer)> {
        let k = self.cfg.accumulation;
        let mut total = GradBuffer::zeros(&self.state.params);
        let mut loss = 0.0;
        for micro in 0..k {
            let tasks = self.micro_batch(step, micro)?;
            let (l, g) = match batch_loss_gradient(
                self.net,
                &self.state.params,
                &tasks,
                self.cfg.variant,
                1.0 / k as f64,
            ) {
                Ok(r) => r,
                Err(e @ AfinError::NonFinite(_)) => {
                    self.dump(step, &tasks)?;
                    return Err(AfinError::NonFinite(format!(
                        "step {step}, micro-batch {micro}: {e}"
                    )));
                }
                Err(e) => return Err(e),
            };
            loss += l / k as f64;
            total.add_scaled(&g, 1.0);
        }
        Ok((loss, total))
    }

    fn dump(&self, step: u64, tasks: &[TaskInstance]) -> Result<()> {
        if let Some(dir) = &self.dump_dir {
            std::fs::create_dir_all(dir)?;
            let body: String = tasks.iter().map(|t| t.to_json() + "\n").collect();
            std::fs::write(dir.join(format!("nan_batch_step{step}.jsonl")), body)?;
        }
        Ok(())
    }

    /// One optimizer update followed by the EMA update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let step = self.state.step;
        let (loss, grads) = self.accumulated_gradient(step)?;
        let lr = self.schedule.lr(step);
        self.state.optimizer.step(
            &mut self.state.params,
            &grads,
            lr,
            &self.trainable,
            &self.decay,
        );
        ema_update(&mut self.state.ema, &self.state.params, self.cfg.ema_decay);
        self.state.step += 1;
        Ok(StepRecord {
            step,
            loss,
            lr,
            wallclock_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs until `cfg.steps` updates are done, calling `on_step` after
    /// each and checkpointing to `checkpoint` when given.
    pub fn run(
        &mut self,
        checkpoint: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < self.cfg.steps {
            let rec = self.step()?;
            on_step(&rec, &self.state)?;
            if let Some(path) = checkpoint {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.state.step % every == 0 && self.state.step < self.cfg.steps {
                    self.state.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.state.save(path)?;
        }
        Ok(())
    }
}
