use afin::error::AfinError;
use afin::factor_model::{FactorType, TaskInstance};
use afin::network::{Afin, DecoderVariant, ModelConfig};
use afin::params::ParameterStore;
use afin::rng::stream;
use afin::simulator::{simulate_micro_batch, simulate_task, simulate_task_sized, SimulatorConfig};
use afin::tape::Graph;
use afin::training::{
    batch_loss_gradient, finite_difference_check, load_weights, task_loss_gradient,
    GradcheckOptions, TrainConfig, TrainState, Trainer,
};
use rand::seq::SliceRandom;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

fn randomized(seed: u64, scale: f64) -> (Afin, ParameterStore) {
    let (net, mut store) = Afin::build(ModelConfig::toy(), seed).unwrap();
    store.randomize(scale, &mut stream(seed, &[77]));
    (net, store)
}

fn tasks(sim: &SimulatorConfig, seed: u64, n: usize) -> Vec<TaskInstance> {
    let mut rng = stream(seed, &[1]);
    (0..n)
        .map(|_| simulate_task(sim, &mut rng).unwrap())
        .collect()
}

fn small_run(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        micro_batch: 3,
        accumulation: 2,
        peak_lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn loss_of_a_standard_normal_head_at_its_mean() {
    // zero-initialized heads give μ = 0 and Λ = (softplus(0) + floor) I = I
    let config = ModelConfig {
        precision_floor: 1.0 - std::f64::consts::LN_2,
        ..ModelConfig::toy()
    };
    let (net, store) = Afin::build(config, 3).unwrap();
    let sim = SimulatorConfig::conjugate(4, 5);
    for mut task in tasks(&sim, 0, 10) {
        task.z = Some(vec![0.0; task.d]);
        let (loss, _) =
            task_loss_gradient(&net, &store, &task, DecoderVariant::Gaussian, 1.0).unwrap();
        assert!(
            (loss - HALF_LOG_2PI).abs() < 1e-12,
            "d={} loss={loss}",
            task.d
        );
    }
}

#[test]
fn loss_ignores_likelihood_order_and_duplication() {
    let (net, store) = randomized(5, 0.3);
    let sim = SimulatorConfig {
        d_max: 4,
        n_max: 6,
        ..SimulatorConfig::default()
    };
    let batch = tasks(&sim, 2, 6);
    let (base, _) =
        batch_loss_gradient(&net, &store, &batch, DecoderVariant::Gaussian, 1.0).unwrap();
    let mut rng = stream(9, &[0]);
    let shuffled: Vec<TaskInstance> = batch
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.likelihoods.shuffle(&mut rng);
            t
        })
        .collect();
    let (perm, _) =
        batch_loss_gradient(&net, &store, &shuffled, DecoderVariant::Gaussian, 1.0).unwrap();
    assert!(
        (perm - base).abs() <= 1e-10 * base.abs(),
        "{perm} vs {base}"
    );

    let doubled: Vec<TaskInstance> = batch.iter().flat_map(|t| [t.clone(), t.clone()]).collect();
    let (dup, _) =
        batch_loss_gradient(&net, &store, &doubled, DecoderVariant::Gaussian, 1.0).unwrap();
    assert!((dup - base).abs() <= 1e-12 * base.abs(), "{dup} vs {base}");
}

#[test]
fn per_task_weight_is_inverse_dimension() {
    let (net, store) = randomized(6, 0.3);
    let sim = SimulatorConfig::default();
    let mut rng = stream(4, &[0]);
    for d in [2, 4] {
        let task = simulate_task_sized(&sim, d, 3, &mut rng).unwrap();
        let (loss, grads) =
            task_loss_gradient(&net, &store, &task, DecoderVariant::Gaussian, 1.0).unwrap();
        // raw −log q and its gradient straight from the tape
        let g = Graph::new(&store);
        let fwd = net.forward(&g, &task).unwrap();
        let lp = net
            .log_prob(&g, &fwd, DecoderVariant::Gaussian, task.z.as_ref().unwrap())
            .unwrap();
        assert!((loss * d as f64 + lp.item()).abs() < 1e-12 * lp.item().abs().max(1.0));
        let raw = g.backward(&lp, -1.0);
        for (pid, t) in raw {
            for (a, b) in grads.tensors[pid].data().iter().zip(t.data()) {
                assert!((a * d as f64 - b).abs() <= 1e-12 * b.abs().max(1e-12));
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let sim = SimulatorConfig {
        d_max: 3,
        n_max: 4,
        ..SimulatorConfig::default()
    };
    let batch = tasks(&sim, 8, 3);
    let opts = GradcheckOptions::default();
    let (net, fresh) = Afin::build(ModelConfig::toy(), 1).unwrap();
    let (_, moved) = randomized(1, 0.2);
    for (label, store) in [("fresh", &fresh), ("randomized", &moved)] {
        for variant in [DecoderVariant::Gaussian, DecoderVariant::Flow] {
            let report =
                finite_difference_check(&net, store, &batch, variant, &opts, &mut stream(2, &[3]))
                    .unwrap();
            assert_eq!(report.probes.len(), 200);
            assert!(
                report.max_rel_err < 1e-4,
                "{label} {variant:?}: {:?}",
                report.worst
            );
        }
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let (net, store) = randomized(2, 0.2);
    let batch = tasks(&SimulatorConfig::conjugate(3, 4), 1, 2);
    let opts = GradcheckOptions {
        probes: 20,
        corrupt: true,
        ..GradcheckOptions::default()
    };
    let report = finite_difference_check(
        &net,
        &store,
        &batch,
        DecoderVariant::Gaussian,
        &opts,
        &mut stream(0, &[0]),
    )
    .unwrap();
    assert!(report.max_rel_err > 1e-2);
}

#[test]
fn finite_differences_degrade_with_a_coarse_step() {
    // soft check: compare the median error over the same probes
    let (net, store) = randomized(3, 0.3);
    let batch = tasks(&SimulatorConfig::conjugate(3, 4), 5, 2);
    let median = |h: f64| {
        let opts = GradcheckOptions {
            probes: 60,
            step: h,
            ..GradcheckOptions::default()
        };
        let r = finite_difference_check(
            &net,
            &store,
            &batch,
            DecoderVariant::Gaussian,
            &opts,
            &mut stream(4, &[4]),
        )
        .unwrap();
        let mut e: Vec<f64> = r.probes.iter().map(|p| p.rel_err).collect();
        e.sort_by(f64::total_cmp);
        e[e.len() / 2]
    };
    assert!(median(1e-3) >= median(1e-5));
}

#[test]
fn absent_factor_types_get_no_gradient() {
    let (net, store) = randomized(4, 0.3);
    let batch = tasks(&SimulatorConfig::conjugate(3, 5), 3, 4);
    let (_, grads) =
        batch_loss_gradient(&net, &store, &batch, DecoderVariant::Gaussian, 1.0).unwrap();
    for (pid, info) in store.infos().iter().enumerate() {
        let present = [FactorType::DiagGaussian, FactorType::LinGaussian]
            .iter()
            .any(|t| info.name.starts_with(&format!("adapter.{}.", t.name())));
        let g = grads.tensors[pid].max_abs();
        if info.name.starts_with("adapter.") && !present {
            assert_eq!(g, 0.0, "{}", info.name);
        }
        if info.name.starts_with("decoder.flow.") {
            assert_eq!(g, 0.0, "{}", info.name);
        }
        if present {
            assert!(g > 0.0, "{}", info.name);
        }
    }
}

#[test]
fn unused_parameter_has_flat_loss() {
    let (net, store) = randomized(7, 0.3);
    let batch = tasks(&SimulatorConfig::conjugate(3, 4), 7, 2);
    let (_, grads) =
        batch_loss_gradient(&net, &store, &batch, DecoderVariant::Gaussian, 1.0).unwrap();
    let pid = store
        .id("adapter.binomial_logit.node.0.w")
        .expect("adapter weight exists");
    assert_eq!(grads.tensors[pid].max_abs(), 0.0);
    let h = 1e-5;
    let mut work = store.clone();
    let orig = store.value(pid).data()[0];
    work.value_mut(pid).data_mut()[0] = orig + h;
    let (up, _) = batch_loss_gradient(&net, &work, &batch, DecoderVariant::Gaussian, 1.0).unwrap();
    work.value_mut(pid).data_mut()[0] = orig - h;
    let (down, _) =
        batch_loss_gradient(&net, &work, &batch, DecoderVariant::Gaussian, 1.0).unwrap();
    assert!(((up - down) / (2.0 * h)).abs() < 1e-8);
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let (net, store) = Afin::build(ModelConfig::toy(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.afin");
    let cfg = small_run(0);
    let mut tr = Trainer::new(
        &net,
        TrainState::new(store.clone(), cfg.adamw.clone()),
        SimulatorConfig::conjugate(3, 8),
        cfg,
    )
    .unwrap();
    tr.run(Some(&path), |_, _| panic!("no steps expected"))
        .unwrap();
    for ema in [false, true] {
        let back = load_weights(&path, &store, ema).unwrap();
        assert_eq!(bits(&back.flatten()), bits(&store.flatten()));
    }
}

fn train(steps: u64, cfg: TrainConfig, init: TrainState, net: &Afin) -> (Vec<f64>, TrainState) {
    let mut tr = Trainer::new(
        net,
        init,
        SimulatorConfig::conjugate(3, 8),
        TrainConfig { steps, ..cfg },
    )
    .unwrap();
    let mut losses = Vec::new();
    tr.run(None, |r, _| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    (losses, tr.state)
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let (net, store) = Afin::build(ModelConfig::toy(), 13).unwrap();
    let cfg = small_run(4);
    let (a, sa) = train(
        4,
        cfg.clone(),
        TrainState::new(store.clone(), cfg.adamw.clone()),
        &net,
    );
    let (b, sb) = train(
        4,
        cfg.clone(),
        TrainState::new(store.clone(), cfg.adamw.clone()),
        &net,
    );
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&sa.params.flatten()), bits(&sb.params.flatten()));
    assert_eq!(bits(&sa.ema.flatten()), bits(&sb.ema.flatten()));
    let (c, _) = train(
        4,
        TrainConfig {
            seed: 12,
            ..cfg.clone()
        },
        TrainState::new(store, cfg.adamw.clone()),
        &net,
    );
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn resuming_from_a_checkpoint_is_bit_identical() {
    let (net, store) = Afin::build(ModelConfig::toy(), 14).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        ..small_run(4)
    };
    let (straight, full) = train(
        4,
        cfg.clone(),
        TrainState::new(store.clone(), cfg.adamw.clone()),
        &net,
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.afin");
    // same schedule (steps = 4) but stop after two updates
    let mut tr = Trainer::new(
        &net,
        TrainState::new(store.clone(), cfg.adamw.clone()),
        SimulatorConfig::conjugate(3, 8),
        cfg.clone(),
    )
    .unwrap();
    let mut first = vec![tr.step().unwrap().loss, tr.step().unwrap().loss];
    tr.state.save(&path).unwrap();
    drop(tr);

    let state = TrainState::load(&path, &store, cfg.adamw.clone()).unwrap();
    assert_eq!(state.step, 2);
    let (rest, resumed) = train(4, cfg, state, &net);
    first.extend(rest);
    assert_eq!(bits(&first), bits(&straight));
    assert_eq!(
        bits(&resumed.params.flatten()),
        bits(&full.params.flatten())
    );
    assert_eq!(bits(&resumed.ema.flatten()), bits(&full.ema.flatten()));
    for (a, b) in resumed.optimizer.v.iter().zip(&full.optimizer.v) {
        assert_eq!(bits(a.data()), bits(b.data()));
    }
}

#[test]
fn checkpoint_rejects_a_different_registry() {
    let (_, store) = Afin::build(ModelConfig::toy(), 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.afin");
    TrainState::new(store, Default::default())
        .save(&path)
        .unwrap();
    let (_, other) = Afin::build(ModelConfig::paper_default(), 15).unwrap();
    assert!(matches!(
        TrainState::load(&path, &other, Default::default()),
        Err(AfinError::Checkpoint(_))
    ));
}

#[test]
fn accumulation_equals_one_large_batch() {
    let (net, mut store) = Afin::build(ModelConfig::toy(), 16).unwrap();
    store.randomize(0.2, &mut stream(16, &[1]));
    let cfg = TrainConfig {
        micro_batch: 3,
        accumulation: 3,
        seed: 21,
        ..TrainConfig::default()
    };
    let sim = SimulatorConfig::conjugate(3, 8);
    let tr = Trainer::new(
        &net,
        TrainState::new(store.clone(), cfg.adamw.clone()),
        sim.clone(),
        cfg.clone(),
    )
    .unwrap();
    let (loss, acc) = tr.accumulated_gradient(5).unwrap();

    let mut all = Vec::new();
    for m in 0..3u64 {
        all.extend(simulate_micro_batch(&sim, 21, &[5, m], 3).unwrap());
    }
    let (big_loss, big) =
        batch_loss_gradient(&net, &store, &all, DecoderVariant::Gaussian, 1.0).unwrap();
    assert!((loss - big_loss).abs() <= 1e-12 * big_loss.abs());
    let (a, b) = (acc.flatten(), big.flatten());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (x, y) in a.iter().zip(&b) {
        assert!(
            (x - y).abs() <= 1e-12 * y.abs().max(1e-3 * scale),
            "{x} vs {y}"
        );
    }
}

#[test]
fn zero_ema_decay_tracks_live_weights() {
    let (net, store) = Afin::build(ModelConfig::toy(), 17).unwrap();
    let cfg = TrainConfig {
        ema_decay: 0.0,
        ..small_run(3)
    };
    let mut tr = Trainer::new(
        &net,
        TrainState::new(store, cfg.adamw.clone()),
        SimulatorConfig::conjugate(3, 8),
        cfg,
    )
    .unwrap();
    for _ in 0..3 {
        tr.step().unwrap();
        assert_eq!(
            bits(&tr.state.ema.flatten()),
            bits(&tr.state.params.flatten())
        );
    }
}

#[test]
fn variants_train_their_own_parameters() {
    let (net, store) = Afin::build(ModelConfig::toy(), 18).unwrap();
    let flow_ids: Vec<usize> = (0..store.len())
        .filter(|&p| store.info(p).name.starts_with("decoder.flow."))
        .collect();
    assert!(!flow_ids.is_empty());
    let (_, gauss) = train(
        2,
        small_run(2),
        TrainState::new(store.clone(), Default::default()),
        &net,
    );
    for &p in &flow_ids {
        assert_eq!(gauss.params.value(p), store.value(p));
    }
    let flow_cfg = TrainConfig {
        variant: DecoderVariant::Flow,
        ..small_run(2)
    };
    let (_, flow) = train(
        2,
        flow_cfg,
        TrainState::new(store.clone(), Default::default()),
        &net,
    );
    assert!(flow_ids
        .iter()
        .any(|&p| flow.params.value(p) != store.value(p)));
}

#[test]
fn non_finite_loss_aborts_with_a_batch_dump() {
    let (net, mut store) = Afin::build(ModelConfig::toy(), 19).unwrap();
    let pid = store.id("decoder.gaussian.node.1.w").unwrap_or_else(|| {
        (0..store.len())
            .find(|&p| store.info(p).name.starts_with("decoder.gaussian."))
            .unwrap()
    });
    store.value_mut(pid).data_mut().fill(f64::NAN);
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(
        &net,
        TrainState::new(store, Default::default()),
        SimulatorConfig::conjugate(3, 8),
        small_run(2),
    )
    .unwrap();
    tr.dump_dir = Some(dir.path().to_path_buf());
    let err = tr.step().unwrap_err();
    assert!(matches!(err, AfinError::NonFinite(_)), "{err}");
    let dump = std::fs::read_to_string(dir.path().join("nan_batch_step0.jsonl")).unwrap();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 3);
    TaskInstance::from_json(lines[0]).unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let (net, store) = Afin::build(ModelConfig::toy(), 20).unwrap();
    for cfg in [
        TrainConfig {
            micro_batch: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            peak_lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(Trainer::new(
            &net,
            TrainState::new(store.clone(), Default::default()),
            SimulatorConfig::conjugate(3, 8),
            cfg
        )
        .is_err());
    }
}
