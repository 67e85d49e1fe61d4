use std::path::PathBuf;
use std::process::ExitCode;

use afin::eval::Method;
use afin::network::DecoderVariant;
use afin_cli::commands::{self, GradcheckArgs};
use afin_cli::{Profile, RunConfig};
use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "afin", version, about = "Amortized factor inference networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile: toy or paper-default.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Gaussian,
    Flow,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write simulated tasks as JSON lines and print a histogram.
    Simulate {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and checkpoint.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        variant: Option<VariantArg>,
        /// Print the trailing loss every this many steps (0: never).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Score methods against reference posteriors on a task file.
    Eval {
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Comma-separated subset of afin, afin+snis, mcmc, oracle.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Post-warmup iterations of reference chains.
        #[arg(long)]
        mcmc_iterations: Option<usize>,
        #[arg(long)]
        reference_samples: Option<usize>,
        #[arg(long)]
        variant: Option<VariantArg>,
        /// Use live weights instead of the EMA.
        #[arg(long)]
        live_weights: bool,
    },
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value = "both")]
        variant: VariantArg,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Perturb the analytic gradient (negative control).
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Closed-form posteriors against quadrature and MCMC.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        /// Post-warmup RWM iterations per task (0 skips the chains).
        #[arg(long, default_value_t = 200_000)]
        mcmc_iterations: usize,
    },
}

fn variants(v: VariantArg) -> Vec<DecoderVariant> {
    match v {
        VariantArg::Gaussian => vec![DecoderVariant::Gaussian],
        VariantArg::Flow => vec![DecoderVariant::Flow],
        VariantArg::Both => vec![DecoderVariant::Gaussian, DecoderVariant::Flow],
    }
}

fn single(v: VariantArg) -> Result<DecoderVariant> {
    match v {
        VariantArg::Both => bail!("choose gaussian or flow"),
        v => Ok(variants(v)[0]),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.profile)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if let Some(d) = &common.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve(&cli.common)?;
    match &cli.cmd {
        Cmd::Train { steps, variant, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(v) = variant {
                cfg.train.variant = single(*v)?;
            }
        }
        Cmd::Eval {
            tasks,
            methods,
            budgets,
            mcmc_iterations,
            reference_samples,
            variant,
            ..
        } => {
            if let Some(t) = tasks {
                cfg.paths.tasks = Some(t.clone());
            }
            if let Some(m) = methods {
                cfg.eval.methods = m.clone();
            }
            if let Some(b) = budgets {
                cfg.eval.budgets = b.clone();
            }
            if let Some(i) = mcmc_iterations {
                cfg.eval.mcmc_reference_iterations = *i;
            }
            if let Some(r) = reference_samples {
                cfg.eval.reference_samples = *r;
            }
            if let Some(v) = variant {
                cfg.eval.variant = single(*v)?;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }

    match cli.cmd {
        Cmd::Simulate { count, out } => {
            let summary = commands::simulate(&cfg, count, &out)?;
            println!(
                "seed {} schema_version {}",
                cfg.seed,
                afin_cli::SCHEMA_VERSION
            );
            print!("{}", summary.render());
        }
        Cmd::Train {
            resume, log_every, ..
        } => {
            let mut window = Vec::new();
            let outcome = commands::train(&cfg, resume, |step, loss| {
                window.push(loss);
                if log_every > 0 && (step + 1) % log_every == 0 {
                    let mean = window.iter().sum::<f64>() / window.len() as f64;
                    eprintln!("step {:>7}  loss {mean:.5}", step + 1);
                    window.clear();
                }
            })?;
            println!("{}", serde_json::to_string(&outcome)?);
        }
        Cmd::Eval { live_weights, .. } => {
            let outcome = commands::eval(&cfg, !live_weights)?;
            if !outcome.trained {
                eprintln!(
                    "note: no checkpoint at {}, using the initialization",
                    cfg.checkpoint_path().display()
                );
            }
            for n in &outcome.notices {
                eprintln!("{n}");
            }
            println!(
                "{}",
                serde_json::json!({
                    "schema_version": afin_cli::SCHEMA_VERSION,
                    "seed": cfg.seed,
                    "rows": outcome.rows.len(),
                    "skipped": outcome.notices.len(),
                    "report": outcome.report,
                    "aggregate": outcome.aggregate,
                })
            );
        }
        Cmd::Gradcheck {
            variant,
            probes,
            tasks,
            tolerance,
            corrupt_gradient,
        } => {
            let mut args = GradcheckArgs {
                variants: variants(variant),
                tasks,
                tolerance,
                ..GradcheckArgs::default()
            };
            args.options.probes = probes;
            args.options.corrupt = corrupt_gradient;
            let results = commands::gradcheck(&cfg, &args)?;
            let mut ok = true;
            for r in &results {
                println!("{}", serde_json::to_string(r)?);
                if !r.passed {
                    ok = false;
                    eprintln!(
                        "gradcheck failed for {:?}: worst offender {:?}",
                        r.variant, r.report.worst
                    );
                }
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::OracleCheck {
            tasks,
            mcmc_iterations,
        } => {
            let mut report = commands::oracle_check(&cfg, tasks, mcmc_iterations)?;
            let path = cfg.paths.out_dir.join("oracle_check.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            report.checks.clear();
            println!("{}", serde_json::to_string(&report)?);
            if !report.passed {
                eprintln!("oracle check failed: worst offender {:?}", report.worst);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
