use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use afin::eval::{
    adaptive_rwm, evaluate_task, metric_m1, metric_m2, prior_location, quadrature_moments,
    sample_moments, McmcConfig, Method, MetricsRow, Moments,
};
use afin::factor_model::{conjugate_posterior_oracle, FactorType, LogPosterior, TaskInstance};
use afin::network::{Afin, DecoderVariant};
use afin::params::ParameterStore;
use afin::rng::{purpose, stream};
use afin::simulator::{simulate_task, SimulatorConfig};
use afin::training::{
    finite_difference_check, load_weights, GradcheckOptions, GradcheckReport, TrainState, Trainer,
};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, SCHEMA_VERSION};

/// Task `i` of a run seeded with `seed`.
pub fn task_stream_labels(i: u64) -> [u64; 2] {
    [purpose::TASK, i]
}

fn simulated(sim: &SimulatorConfig, seed: u64, count: usize) -> Result<Vec<TaskInstance>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            Ok(simulate_task(
                sim,
                &mut stream(seed, &task_stream_labels(i)),
            )?)
        })
        .collect()
}

#[derive(Debug, Default, Serialize)]
pub struct TaskSummary {
    pub count: usize,
    pub by_d: BTreeMap<usize, usize>,
    pub by_n: BTreeMap<usize, usize>,
    /// Factor counts per type, priors and likelihoods together.
    pub by_type: BTreeMap<String, usize>,
}

impl TaskSummary {
    fn add(&mut self, task: &TaskInstance) {
        self.count += 1;
        *self.by_d.entry(task.d).or_default() += 1;
        *self.by_n.entry(task.n()).or_default() += 1;
        for f in task.factors() {
            *self.by_type.entry(f.factor_type().to_string()).or_default() += 1;
        }
    }

    /// Text histogram.
    pub fn render(&self) -> String {
        let bar = |n: usize| "#".repeat((60 * n).div_ceil(self.count.max(1)));
        let mut out = format!("{} tasks\n", self.count);
        for (title, map) in [("d", &self.by_d), ("N", &self.by_n)] {
            for (k, &n) in map {
                out += &format!("{title:>2} = {k:<4} {n:>7} {}\n", bar(n));
            }
        }
        for (k, n) in &self.by_type {
            out += &format!("{k:<16} {n:>8}\n");
        }
        out
    }
}

/// Writes `count` simulated tasks as JSON lines.
pub fn simulate(cfg: &RunConfig, count: usize, out: &Path) -> Result<TaskSummary> {
    let tasks = simulated(&cfg.simulator, cfg.seed, count)?;
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut summary = TaskSummary::default();
    for (i, task) in tasks.iter().enumerate() {
        let mut v = serde_json::to_value(task)?;
        v["schema_version"] = json!(SCHEMA_VERSION);
        v["seed"] = json!(cfg.seed);
        v["task_id"] = json!(i);
        serde_json::to_writer(&mut w, &v)?;
        w.write_all(b"\n")?;
        summary.add(task);
    }
    w.flush()?;
    Ok(summary)
}

/// Reads a JSON-lines task file; ids come from `task_id` when present,
/// otherwise the line order.
pub fn read_tasks(path: &Path) -> Result<Vec<(usize, TaskInstance)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (line_no, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), line_no + 1))?;
        let id = v
            .get("task_id")
            .and_then(Value::as_u64)
            .map_or(out.len(), |i| i as usize);
        let task: TaskInstance = serde_json::from_value(v)
            .with_context(|| format!("{}:{}", path.display(), line_no + 1))?;
        out.push((id, task));
    }
    Ok(out)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub schema_version: u32,
    pub seed: u64,
    pub start_step: u64,
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub wallclock_s: f64,
    /// Mean loss of the last 100 steps run (NaN when none ran).
    pub trailing_loss: f64,
}

/// Trains from scratch or, with `resume`, from the configured checkpoint.
/// `on_step` sees `(step, loss)` after every update.
pub fn train(
    cfg: &RunConfig,
    resume: bool,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainOutcome> {
    let (net, init) = Afin::build(cfg.model.clone(), cfg.seed)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let ckpt = cfg.checkpoint_path();
    let state = if resume {
        if !ckpt.exists() {
            bail!("cannot resume: {} does not exist", ckpt.display());
        }
        TrainState::load(&ckpt, &init, tcfg.adamw.clone())
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?
    } else {
        TrainState::new(init, tcfg.adamw.clone())
    };
    let start_step = state.step;
    write_json(&cfg.paths.out_dir.join("run_config.json"), cfg)?;

    let metrics = cfg.paths.out_dir.join("train_metrics.csv");
    let append = resume && metrics.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics)
        .with_context(|| format!("opening {}", metrics.display()))?;
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if !append {
        csv.write_record([
            "schema_version",
            "seed",
            "step",
            "loss",
            "lr",
            "wallclock_s",
        ])?;
    }

    let mut trainer = Trainer::new(&net, state, cfg.simulator.clone(), tcfg)?;
    trainer.dump_dir = Some(cfg.paths.out_dir.join("nan_dump"));
    let start = Instant::now();
    let mut recent = Vec::new();
    let mut io_err = None;
    trainer.run(Some(&ckpt), |rec, _| {
        let row = [
            SCHEMA_VERSION.to_string(),
            cfg.seed.to_string(),
            rec.step.to_string(),
            rec.loss.to_string(),
            rec.lr.to_string(),
            format!("{:.6}", start.elapsed().as_secs_f64()),
        ];
        if let Err(e) = csv.write_record(&row) {
            io_err.get_or_insert(e);
        }
        recent.push(rec.loss);
        if recent.len() > 100 {
            recent.remove(0);
        }
        on_step(rec.step, rec.loss);
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    csv.flush()?;
    Ok(TrainOutcome {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        start_step,
        final_step: trainer.state.step,
        checkpoint: ckpt,
        metrics,
        wallclock_s: start.elapsed().as_secs_f64(),
        trailing_loss: if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        },
    })
}

/// Network and weights for evaluation: EMA (or live) weights from the
/// checkpoint when it exists, the seeded initialization otherwise.
pub fn load_model(cfg: &RunConfig, ema: bool) -> Result<(Afin, ParameterStore, bool)> {
    let (net, init) = Afin::build(cfg.model.clone(), cfg.seed)?;
    let ckpt = cfg.checkpoint_path();
    if ckpt.exists() {
        let store = load_weights(&ckpt, &init, ema)
            .with_context(|| format!("loading {}", ckpt.display()))?;
        Ok((net, store, true))
    } else {
        Ok((net, init, false))
    }
}

#[derive(Debug, Serialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    pub budget: usize,
    pub tasks: usize,
    pub m1: f64,
    pub m2: f64,
    pub sw2: f64,
    /// Mean over rows where it is defined.
    pub pareto_k: f64,
    pub wallclock_s: f64,
}

pub fn aggregate(rows: &[MetricsRow], seed: u64) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        let mi = Method::ALL
            .iter()
            .position(|&m| m == r.method)
            .unwrap_or(usize::MAX);
        groups.entry((mi, r.budget)).or_default().push(r);
    }
    let mean = |v: Vec<f64>| {
        let v: Vec<f64> = v.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    groups
        .into_values()
        .map(|g| AggregateRow {
            schema_version: SCHEMA_VERSION,
            seed,
            method: g[0].method,
            budget: g[0].budget,
            tasks: g.len(),
            m1: mean(g.iter().map(|r| r.m1).collect()),
            m2: mean(g.iter().map(|r| r.m2).collect()),
            sw2: mean(g.iter().map(|r| r.sw2).collect()),
            pareto_k: mean(g.iter().map(|r| r.pareto_k).collect()),
            wallclock_s: mean(g.iter().map(|r| r.wallclock_s).collect()),
        })
        .collect()
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub rows: Vec<MetricsRow>,
    pub notices: Vec<String>,
    pub report: PathBuf,
    pub aggregate: PathBuf,
    /// False when no checkpoint was found and the initialization was used.
    pub trained: bool,
}

/// Evaluates every configured method and budget on the task file.
pub fn eval(cfg: &RunConfig, ema: bool) -> Result<EvalOutcome> {
    let Some(tasks_path) = &cfg.paths.tasks else {
        bail!("eval needs a task file (--tasks or paths.tasks)");
    };
    let tasks = read_tasks(tasks_path)?;
    let (net, store, trained) = load_model(cfg, ema)?;
    let uses_net = cfg
        .eval
        .methods
        .iter()
        .any(|m| matches!(m, Method::Afin | Method::AfinSnis));
    if uses_net && !trained && cfg.paths.checkpoint.is_some() {
        bail!(
            "checkpoint {} does not exist",
            cfg.checkpoint_path().display()
        );
    }
    let results: Vec<_> = tasks
        .par_iter()
        .map(|(id, task)| {
            evaluate_task(&net, &store, task, *id, &cfg.eval, cfg.seed)
                .with_context(|| format!("task {id}"))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for (r, n) in results {
        rows.extend(r);
        notices.extend(n);
    }
    let report = cfg.paths.out_dir.join("eval_report.jsonl");
    let mut w = BufWriter::new(
        File::create(&report).with_context(|| format!("creating {}", report.display()))?,
    );
    for r in &rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let aggregate_path = cfg.paths.out_dir.join("eval_aggregate.csv");
    let mut csv = csv::Writer::from_path(&aggregate_path)?;
    for a in aggregate(&rows, cfg.seed) {
        csv.serialize(a)?;
    }
    csv.flush()?;
    Ok(EvalOutcome {
        rows,
        notices,
        report,
        aggregate: aggregate_path,
        trained,
    })
}

#[derive(Debug, Clone)]
pub struct GradcheckArgs {
    pub variants: Vec<DecoderVariant>,
    pub tasks: usize,
    /// Size caps of the probe tasks, keeping finite differences cheap.
    pub d_max: usize,
    pub n_max: usize,
    pub tolerance: f64,
    pub options: GradcheckOptions,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            variants: vec![DecoderVariant::Gaussian, DecoderVariant::Flow],
            tasks: 4,
            d_max: 3,
            n_max: 4,
            tolerance: 1e-4,
            options: GradcheckOptions::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub variant: DecoderVariant,
    pub probes: usize,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(flatten)]
    pub report: GradcheckReport,
}

/// Finite-difference check of the model (checkpoint weights when present).
pub fn gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<Vec<GradcheckSummary>> {
    let (net, store, _) = load_model(cfg, false)?;
    let sim = SimulatorConfig {
        d_max: cfg.simulator.d_max.min(args.d_max),
        n_max: cfg.simulator.n_max.min(args.n_max),
        d_min: cfg.simulator.d_min.min(args.d_max),
        n_min: cfg.simulator.n_min.min(args.n_max),
        ..cfg.simulator.clone()
    };
    let tasks = simulated(&sim, cfg.seed, args.tasks)?;
    let mut out = Vec::new();
    for (vi, &variant) in args.variants.iter().enumerate() {
        if variant == DecoderVariant::Flow && net.flow().is_none() {
            bail!("model has no flow decoder");
        }
        let mut rng = stream(cfg.seed, &[purpose::GRADCHECK, vi as u64]);
        let mut report =
            finite_difference_check(&net, &store, &tasks, variant, &args.options, &mut rng)?;
        let passed = report.max_rel_err < args.tolerance;
        report.probes.clear();
        out.push(GradcheckSummary {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            variant,
            probes: args.options.probes,
            tolerance: args.tolerance,
            passed,
            report,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleTaskCheck {
    pub task_id: usize,
    pub d: usize,
    pub n: usize,
    /// Largest absolute difference of a mean or covariance entry.
    pub quadrature_err: f64,
    pub mcmc_m1: f64,
    pub mcmc_m2: f64,
    pub mcmc_acceptance: f64,
}

#[derive(Debug, Serialize)]
pub struct OracleCheckReport {
    pub schema_version: u32,
    pub seed: u64,
    pub tasks: usize,
    pub mcmc_iterations: usize,
    pub max_quadrature_err: f64,
    pub max_mcmc_m1: f64,
    pub max_mcmc_m2: f64,
    pub quadrature_tolerance: f64,
    pub mcmc_m1_tolerance: f64,
    pub mcmc_m2_tolerance: f64,
    pub passed: bool,
    pub worst: Option<OracleTaskCheck>,
    pub checks: Vec<OracleTaskCheck>,
}

/// Simulator restricted to closed-form tasks of dimension at most 2.
pub fn oracle_simulator(sim: &SimulatorConfig) -> SimulatorConfig {
    SimulatorConfig {
        d_min: 1,
        d_max: sim.d_max.min(2),
        prior_types: vec![FactorType::DiagGaussian, FactorType::FullrankGaussian],
        likelihood_types: vec![FactorType::LinGaussian, FactorType::Gaussian],
        ..sim.clone()
    }
}

fn max_abs_moment_diff(a: &Moments, b: &Moments) -> f64 {
    let mean = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).abs());
    let cov = a
        .cov
        .data()
        .iter()
        .zip(b.cov.data())
        .map(|(x, y)| (x - y).abs());
    mean.chain(cov).fold(0.0, f64::max)
}

/// Closed-form posteriors against quadrature and (when `mcmc_iterations >
/// 0`) an adaptive-RWM chain on `count` random conjugate tasks.
pub fn oracle_check(
    cfg: &RunConfig,
    count: usize,
    mcmc_iterations: usize,
) -> Result<OracleCheckReport> {
    const QUAD_TOL: f64 = 1e-6;
    const M1_TOL: f64 = 0.02;
    const M2_TOL: f64 = 0.05;
    let tasks = simulated(&oracle_simulator(&cfg.simulator), cfg.seed, count)?;
    let checks: Vec<OracleTaskCheck> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let exact = Moments::of_gaussian(&conjugate_posterior_oracle(task)?)?;
            let lp = LogPosterior::new(task)?;
            let target = |z: &[f64]| lp.eval(z);
            let quad = quadrature_moments(&target, &prior_location(task), 8.0)?;
            let (mut m1, mut m2, mut acc) = (f64::NAN, f64::NAN, f64::NAN);
            if mcmc_iterations > 0 {
                let run = adaptive_rwm(
                    &target,
                    &prior_location(task),
                    &McmcConfig::with_warmup_frac(mcmc_iterations, cfg.eval.mcmc_warmup_frac),
                    &mut stream(cfg.seed, &[purpose::MCMC, i as u64]),
                )?;
                let est = sample_moments(&run.samples)?;
                m1 = metric_m1(&est, &exact);
                m2 = metric_m2(&est, &exact);
                acc = run.acceptance;
            }
            Ok(OracleTaskCheck {
                task_id: i,
                d: task.d,
                n: task.n(),
                quadrature_err: max_abs_moment_diff(&quad, &exact),
                mcmc_m1: m1,
                mcmc_m2: m2,
                mcmc_acceptance: acc,
            })
        })
        .collect::<Result<_>>()?;
    let max =
        |f: fn(&OracleTaskCheck) -> f64| checks.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let (q, m1, m2) = (
        max(|c| c.quadrature_err),
        max(|c| c.mcmc_m1),
        max(|c| c.mcmc_m2),
    );
    let fails = |c: &OracleTaskCheck| {
        !(c.quadrature_err < QUAD_TOL)
            || (mcmc_iterations > 0 && !(c.mcmc_m1 < M1_TOL && c.mcmc_m2 < M2_TOL))
    };
    let worst = checks
        .iter()
        .filter(|c| fails(c))
        .max_by(|a, b| a.quadrature_err.total_cmp(&b.quadrature_err))
        .cloned();
    Ok(OracleCheckReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        tasks: count,
        mcmc_iterations,
        max_quadrature_err: q,
        max_mcmc_m1: m1,
        max_mcmc_m2: m2,
        quadrature_tolerance: QUAD_TOL,
        mcmc_m1_tolerance: M1_TOL,
        mcmc_m2_tolerance: M2_TOL,
        passed: worst.is_none(),
        worst,
        checks,
    })
}
