use afin::eval::{
    adaptive_rwm, evaluate_task, gpd_fit, metric_m1, metric_m2, pareto_k, quadrature_moments,
    sample_moments, sliced_w2, sliced_w2_weighted, snis, weight_diagnostics, weighted_moments,
    Directions, EvalConfig, McmcConfig, Method, Moments, WeightedSampleSet,
};
use afin::factor_model::{
    FactorSpec, GaussianDistribution, LogPosterior, Observation, TaskInstance, Theta,
};
use afin::network::{Afin, ModelConfig};
use afin::rng::stream;
use afin::tensor::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn lin(x: Vec<f64>, y: f64, sigma: f64) -> FactorSpec {
    FactorSpec::likelihood(
        Theta::LinGaussian { sigma },
        Some(x),
        Observation::Scalar(y),
    )
}

fn conjugate_task() -> TaskInstance {
    TaskInstance::new(
        2,
        FactorSpec::prior(Theta::DiagGaussian {
            mu: vec![0.3, -0.2],
            sigma: vec![0.9, 0.5],
        }),
        vec![
            lin(vec![0.8, -0.1], 0.6, 0.5),
            lin(vec![0.2, 0.9], -0.4, 0.7),
            lin(vec![-0.5, 0.4], 0.2, 0.3),
            lin(vec![0.6, 0.6], 0.9, 0.8),
        ],
        None,
    )
    .unwrap()
}

/// Posterior of a diagonal-Gaussian prior with scalar linear-Gaussian
/// likelihoods, assembled directly from the normal equations.
fn closed_form(task: &TaskInstance) -> (DVector<f64>, DMatrix<f64>) {
    let d = task.d;
    let Theta::DiagGaussian { mu, sigma } = &task.prior.theta else {
        panic!("diagonal Gaussian prior expected")
    };
    let mut prec = DMatrix::from_diagonal(&DVector::from_iterator(
        d,
        sigma.iter().map(|s| 1.0 / (s * s)),
    ));
    let mut shift = DVector::from_iterator(d, mu.iter().zip(sigma).map(|(m, s)| m / (s * s)));
    for f in &task.likelihoods {
        let Theta::LinGaussian { sigma } = f.theta else {
            panic!("linear-Gaussian likelihood expected")
        };
        let x = DVector::from_column_slice(f.covariate.as_ref().unwrap());
        let y = f.observation.as_ref().unwrap().scalar().unwrap();
        prec += &x * x.transpose() / (sigma * sigma);
        shift += &x * (y / (sigma * sigma));
    }
    let cov = prec.try_inverse().unwrap();
    (&cov * shift, cov)
}

fn gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> GaussianDistribution {
    let prec = cov.clone().try_inverse().unwrap();
    let d = mean.len();
    GaussianDistribution::new(
        mean.as_slice().to_vec(),
        Tensor::from_vec(d, d, prec.transpose().as_slice().to_vec()),
    )
    .unwrap()
}

fn moments_of(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Moments {
    let d = mean.len();
    Moments {
        mean: mean.as_slice().to_vec(),
        cov: Tensor::from_vec(d, d, cov.transpose().as_slice().to_vec()),
    }
}

fn normals(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[]);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn one_hot(samples: Vec<Vec<f64>>, k: usize) -> WeightedSampleSet {
    let lw = (0..samples.len())
        .map(|i| if i == k { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    WeightedSampleSet::new(samples, lw).unwrap()
}

fn linear_fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------- snis

#[test]
fn exact_proposal_gives_uniform_weights() {
    let (m, c) = closed_form(&conjugate_task());
    let q = gaussian(&m, &c).sampler().unwrap();
    let s = 500;
    let same = snis(&q, &|z| q.log_density(z), s, &mut stream(1, &[])).unwrap();
    assert!(same.weights.iter().all(|&w| w == 1.0 / s as f64));

    let shifted = snis(&q, &|z| q.log_density(z) - 17.25, s, &mut stream(1, &[])).unwrap();
    for w in &shifted.weights {
        assert!((w * s as f64 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn snis_mean_lands_in_the_effective_sample_band() {
    let task = conjugate_task();
    let (m, c) = closed_form(&task);
    let q = gaussian(&m, &(&c * 2.0)).sampler().unwrap();
    let lp = LogPosterior::new(&task).unwrap();
    let set = snis(&q, &|z| lp.eval(z), 100_000, &mut stream(2, &[])).unwrap();
    let est = weighted_moments(&set).unwrap();
    let err = metric_m1(&est, &moments_of(&m, &c));
    let band = 3.0 * (c.trace() / set.ess()).sqrt();
    assert!(err < band, "mean error {err} outside {band}");
    assert!(set.ess() > 10_000.0);
}

#[test]
fn proposal_outside_the_support_is_degenerate() {
    let q = gaussian(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1))
        .sampler()
        .unwrap();
    let support = |z: &[f64]| if z[0] > 100.0 { 0.0 } else { f64::NEG_INFINITY };
    assert!(snis(&q, &support, 50, &mut stream(3, &[])).is_err());
    assert!(snis(&q, &|_| 0.0, 1, &mut stream(3, &[])).is_err());
}

#[test]
fn weight_sets_reject_bad_inputs() {
    let z = vec![vec![0.0], vec![1.0]];
    assert!(WeightedSampleSet::new(z.clone(), vec![0.0, f64::NAN]).is_err());
    assert!(WeightedSampleSet::new(z.clone(), vec![0.0, f64::INFINITY]).is_err());
    assert!(WeightedSampleSet::new(z, vec![0.0]).is_err());
}

proptest! {
    #[test]
    fn normalization_ignores_a_constant_shift(
        lw in prop::collection::vec(-30.0f64..30.0, 2..40),
        c in -500.0f64..500.0,
    ) {
        let z: Vec<Vec<f64>> = (0..lw.len()).map(|i| vec![i as f64]).collect();
        let a = WeightedSampleSet::new(z.clone(), lw.clone()).unwrap();
        let b = WeightedSampleSet::new(z, lw.iter().map(|v| v + c).collect()).unwrap();
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1e-300) + 1e-300);
            prop_assert!(*x >= 0.0);
        }
    }
}

// ---------------------------------------------------------------- moments

#[test]
fn uniform_weights_match_unweighted_moments() {
    let z = normals(40, 3, 0.5, 4);
    let w = weighted_moments(&WeightedSampleSet::uniform(z.clone()).unwrap()).unwrap();
    let u = sample_moments(&z).unwrap();
    let s = z.len() as f64;
    for (a, b) in w.mean.iter().zip(&u.mean) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in w.cov.data().iter().zip(u.cov.data()) {
        assert!((a * s / (s - 1.0) - b).abs() < 1e-12);
    }
}

#[test]
fn single_weight_collapses_the_covariance() {
    let z = normals(10, 2, 0.0, 5);
    let m = weighted_moments(&one_hot(z.clone(), 6)).unwrap();
    assert_eq!(m.mean, z[6]);
    assert!(m.cov.data().iter().all(|&c| c == 0.0));
}

proptest! {
    #[test]
    fn weighted_moments_are_translation_equivariant(
        lw in prop::collection::vec(-5.0f64..5.0, 12),
        c in prop::collection::vec(-10.0f64..10.0, 3),
        seed in 0u64..1000,
    ) {
        let z = normals(12, 3, 0.0, seed);
        let moved: Vec<Vec<f64>> = z.iter().map(|v| v.iter().zip(&c).map(|(a, b)| a + b).collect()).collect();
        let a = weighted_moments(&WeightedSampleSet::new(z, lw.clone()).unwrap()).unwrap();
        let b = weighted_moments(&WeightedSampleSet::new(moved, lw).unwrap()).unwrap();
        for i in 0..3 {
            prop_assert!((b.mean[i] - a.mean[i] - c[i]).abs() < 1e-10);
        }
        prop_assert!(a.cov.max_abs_diff(&b.cov) < 1e-10);
    }
}

// ---------------------------------------------------------------- M1 / M2

#[test]
fn moment_metrics_on_identical_and_shifted_sets() {
    let z = normals(200, 3, 0.0, 6);
    let a = sample_moments(&z).unwrap();
    assert_eq!((metric_m1(&a, &a), metric_m2(&a, &a)), (0.0, 0.0));
    let shifted: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0] + 1.0, v[1], v[2]]).collect();
    let b = sample_moments(&shifted).unwrap();
    assert!((metric_m1(&a, &b) - 1.0).abs() < 1e-12);
    assert!(metric_m2(&a, &b) < 1e-12);
}

#[test]
fn oracle_sample_mean_is_within_the_clt_band() {
    let (m, c) = closed_form(&conjugate_task());
    let n = 1_000_000;
    let samples = gaussian(&m, &c).sample_n(n, &mut stream(7, &[])).unwrap();
    let lmax = SymmetricEigen::new(c.clone()).eigenvalues.max();
    let err = metric_m1(&sample_moments(&samples).unwrap(), &moments_of(&m, &c));
    assert!(err < 4.0 * (lmax / n as f64).sqrt(), "M1 {err}");
}

// ---------------------------------------------------------------- sliced W2

#[test]
fn sliced_w2_of_a_set_with_itself_is_zero() {
    let z = normals(300, 4, 0.0, 8);
    let dirs = Directions::random(4, 64, &mut stream(8, &[1]));
    assert_eq!(sliced_w2(&z, &z, &dirs).unwrap(), 0.0);
    let w = WeightedSampleSet::uniform(z).unwrap();
    assert_eq!(sliced_w2_weighted(&w, &w, &dirs).unwrap(), 0.0);
}

#[test]
fn sliced_w2_of_shifted_unit_gaussians_is_the_shift() {
    let dirs = Directions::random(1, 8, &mut stream(9, &[1]));
    let a = normals(100_000, 1, 0.0, 9);
    for (i, m) in [0.0, 0.3, -1.5, 4.0].into_iter().enumerate() {
        let b = normals(100_000, 1, m, 100 + i as u64);
        let sw = sliced_w2(&a, &b, &dirs).unwrap();
        assert!(
            (sw - m.abs()).abs() < 5e-2 * (1.0 + m.abs()),
            "m = {m}: {sw}"
        );
    }
}

#[test]
fn single_axis_direction_is_the_quantile_distance() {
    let a = normals(50, 3, 0.0, 10);
    let b = normals(50, 3, 0.7, 11);
    let mut pa: Vec<f64> = a.iter().map(|v| v[0]).collect();
    let mut pb: Vec<f64> = b.iter().map(|v| v[0]).collect();
    pa.sort_by(f64::total_cmp);
    pb.sort_by(f64::total_cmp);
    let direct = (pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 50.0)
        .sqrt();
    let dirs = Directions::axis(3, 0);
    assert!((sliced_w2(&a, &b, &dirs).unwrap() - direct).abs() < 1e-12);
    let (wa, wb) = (
        WeightedSampleSet::uniform(a).unwrap(),
        WeightedSampleSet::uniform(b).unwrap(),
    );
    assert!((sliced_w2_weighted(&wa, &wb, &dirs).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn sliced_w2_needs_equal_counts() {
    let dirs = Directions::random(2, 4, &mut stream(12, &[]));
    assert!(sliced_w2(&normals(10, 2, 0.0, 1), &normals(11, 2, 0.0, 2), &dirs).is_err());
}

#[test]
fn weighted_sliced_w2_treats_weights_as_multiplicities() {
    // {a (2/3), b (1/3)} is the same law as {a, a, b} with equal weights
    let base = normals(3, 2, 0.0, 13);
    let other = normals(7, 2, 0.4, 14);
    let collapsed = WeightedSampleSet::new(
        vec![base[0].clone(), base[1].clone()],
        vec![(2.0f64).ln(), 0.0],
    )
    .unwrap();
    let expanded =
        WeightedSampleSet::uniform(vec![base[0].clone(), base[0].clone(), base[1].clone()])
            .unwrap();
    let o = WeightedSampleSet::uniform(other).unwrap();
    let dirs = Directions::random(2, 16, &mut stream(14, &[1]));
    let x = sliced_w2_weighted(&collapsed, &o, &dirs).unwrap();
    let y = sliced_w2_weighted(&expanded, &o, &dirs).unwrap();
    assert!((x - y).abs() < 1e-12);
}

proptest! {
    #[test]
    fn sliced_w2_is_symmetric_and_non_negative(sa in 0u64..500, sb in 0u64..500, shift in -2.0f64..2.0) {
        let a = normals(30, 3, 0.0, sa);
        let b = normals(30, 3, shift, sb + 1000);
        let dirs = Directions::random(3, 16, &mut stream(sa ^ sb, &[]));
        let ab = sliced_w2(&a, &b, &dirs).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - sliced_w2(&b, &a, &dirs).unwrap()).abs() < 1e-12);
        let (wa, wb) = (WeightedSampleSet::uniform(a).unwrap(), WeightedSampleSet::uniform(b).unwrap());
        let wab = sliced_w2_weighted(&wa, &wb, &dirs).unwrap();
        prop_assert!((wab - sliced_w2_weighted(&wb, &wa, &dirs).unwrap()).abs() < 1e-12);
        prop_assert!((wab - ab).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------- pareto

#[test]
fn constant_weights_have_no_tail() {
    assert_eq!(pareto_k(&[1.3; 400]), f64::NEG_INFINITY);
    assert!(pareto_k(&[0.0; 24]).is_nan());
}

#[test]
fn bounded_weights_have_a_light_tail() {
    let n01 = gaussian(&DVector::from_element(1, 0.0), &DMatrix::identity(1, 1))
        .sampler()
        .unwrap();
    let q = gaussian(
        &DVector::from_element(1, 0.0),
        &DMatrix::from_element(1, 1, 4.0),
    )
    .sampler()
    .unwrap();
    let mut light = 0;
    for trial in 0..100 {
        let set = snis(
            &q,
            &|z| n01.log_density(z),
            10_000,
            &mut stream(15, &[trial]),
        )
        .unwrap();
        if pareto_k(&set.log_raw_weights) < 0.5 {
            light += 1;
        }
    }
    assert!(light >= 95, "{light}/100 trials below 0.5");
}

#[test]
fn pareto_tail_index_is_recovered() {
    // w = U^(-k) has an exact Pareto tail with shape k
    for k in [0.3, 0.7, 1.2] {
        let mut rng = stream(16, &[(k * 10.0) as u64]);
        let lw: Vec<f64> = (0..20_000).map(|_| -k * rng.random::<f64>().ln()).collect();
        let est = pareto_k(&lw);
        assert!((est - k).abs() < 0.12, "k = {k}: {est}");
    }
}

#[test]
fn gpd_fit_recovers_shape_and_scale() {
    let (k, sigma) = (0.4, 2.0);
    let mut rng = stream(17, &[]);
    let mut x: Vec<f64> = (0..5000)
        .map(|_| sigma * ((1.0 - rng.random::<f64>()).powf(-k) - 1.0) / k)
        .collect();
    x.sort_by(f64::total_cmp);
    let (kh, sh) = gpd_fit(&x);
    assert!((kh - k).abs() < 0.06, "{kh}");
    assert!((sh / sigma - 1.0).abs() < 0.1, "{sh}");
}

// ---------------------------------------------------------------- diagnostics

#[test]
fn diagnostics_at_the_weight_extremes() {
    let z = normals(64, 2, 0.0, 18);
    let f = |v: &[f64]| -0.5 * v.iter().map(|x| x * x).sum::<f64>();
    let u = weight_diagnostics(&WeightedSampleSet::uniform(z.clone()).unwrap(), &f, &z);
    assert!((u.max_weight - 1.0 / 64.0).abs() < 1e-15);
    assert!((u.entropy_ratio - 1.0).abs() < 1e-12);
    assert!(u.energy_gap.abs() < 1e-12);
    let h = weight_diagnostics(&one_hot(z.clone(), 3), &f, &z);
    assert_eq!(h.max_weight, 1.0);
    assert_eq!(h.entropy_ratio, 0.0);
    let single = weight_diagnostics(
        &WeightedSampleSet::uniform(vec![vec![0.0, 0.0]]).unwrap(),
        &f,
        &z,
    );
    assert!(single.entropy_ratio.is_nan());
}

#[test]
fn energy_gap_vanishes_for_an_exact_proposal() {
    let task = conjugate_task();
    let (m, c) = closed_form(&task);
    let post = gaussian(&m, &c);
    let q = post.sampler().unwrap();
    let lp = LogPosterior::new(&task).unwrap();
    let s = 20_000;
    let set = snis(&q, &|z| lp.eval(z), s, &mut stream(19, &[])).unwrap();
    let reference = post.sample_n(s, &mut stream(19, &[1])).unwrap();
    let gap = weight_diagnostics(&set, &|z| lp.eval(z), &reference).energy_gap;
    // −log p̃ of a d-dim Gaussian has variance d/2
    let band = 4.0 * (1.0f64 / s as f64 * 2.0).sqrt();
    assert!(gap.abs() < band, "energy gap {gap}");
}

proptest! {
    #[test]
    fn weight_summaries_stay_in_range(lw in prop::collection::vec(-40.0f64..10.0, 2..60)) {
        let s = lw.len();
        let z: Vec<Vec<f64>> = (0..s).map(|i| vec![i as f64]).collect();
        let w = WeightedSampleSet::new(z.clone(), lw).unwrap();
        let d = weight_diagnostics(&w, &|v| -v[0], &z);
        prop_assert!((0.0..=1.0).contains(&d.entropy_ratio));
        prop_assert!(d.max_weight >= 1.0 / s as f64 - 1e-15 && d.max_weight <= 1.0);
        prop_assert!(w.ess() >= 1.0 - 1e-9 && w.ess() <= s as f64 + 1e-9);
    }
}

#[test]
fn snis_errors_shrink_at_the_monte_carlo_rate() {
    let task = conjugate_task();
    let (m, c) = closed_form(&task);
    let post = gaussian(&m, &c);
    let q = post.sampler().unwrap();
    let lp = LogPosterior::new(&task).unwrap();
    let exact = moments_of(&m, &c);
    let dirs = Directions::random(2, 32, &mut stream(20, &[]));
    let sizes = [100usize, 1000, 10_000];
    let reps = 16;
    let mut curves = [vec![], vec![], vec![]];
    for (i, &s) in sizes.iter().enumerate() {
        let mut sums = [0.0; 3];
        for r in 0..reps {
            let set = snis(&q, &|z| lp.eval(z), s, &mut stream(21, &[i as u64, r])).unwrap();
            let est = weighted_moments(&set).unwrap();
            let reference = WeightedSampleSet::uniform(
                post.sample_n(s, &mut stream(22, &[i as u64, r])).unwrap(),
            )
            .unwrap();
            sums[0] += metric_m1(&est, &exact);
            sums[1] += metric_m2(&est, &exact);
            sums[2] += sliced_w2_weighted(&set, &reference, &dirs).unwrap();
        }
        for k in 0..3 {
            curves[k].push((sums[k] / reps as f64).ln());
        }
    }
    let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    for (name, ys) in ["M1", "M2", "SW2"].iter().zip(&curves) {
        let slope = linear_fit_slope(&xs, ys);
        assert!((-0.65..=-0.35).contains(&slope), "{name} slope {slope}");
    }
}

// ---------------------------------------------------------------- mcmc

#[test]
fn rwm_matches_the_conjugate_posterior() {
    let task = conjugate_task();
    let (m, c) = closed_form(&task);
    let lp = LogPosterior::new(&task).unwrap();
    let run = adaptive_rwm(
        &|z| lp.eval(z),
        &[0.0, 0.0],
        &McmcConfig::new(200_000, 5000),
        &mut stream(23, &[]),
    )
    .unwrap();
    assert!(!run.warning, "acceptance {}", run.acceptance);
    let est = sample_moments(&run.samples).unwrap();
    let exact = moments_of(&m, &c);
    assert!(
        metric_m1(&est, &exact) < 0.02,
        "M1 {}",
        metric_m1(&est, &exact)
    );
    assert!(
        metric_m2(&est, &exact) < 0.05,
        "M2 {}",
        metric_m2(&est, &exact)
    );
}

#[test]
fn rwm_with_uninformative_likelihoods_samples_the_prior() {
    let (mu, sigma) = (vec![0.5, -1.0, 0.2], vec![0.8, 0.4, 1.0]);
    let task = TaskInstance::new(
        3,
        FactorSpec::prior(Theta::DiagGaussian {
            mu: mu.clone(),
            sigma: sigma.clone(),
        }),
        vec![lin(vec![0.0; 3], 1.7, 0.5), lin(vec![0.0; 3], -0.3, 1.0)],
        None,
    )
    .unwrap();
    let lp = LogPosterior::new(&task).unwrap();
    let n = 100_000;
    let run = adaptive_rwm(
        &|z| lp.eval(z),
        &mu,
        &McmcConfig::new(n, 5000),
        &mut stream(24, &[]),
    )
    .unwrap();
    let est = sample_moments(&run.samples).unwrap();
    // RWM in three dimensions decorrelates within a few dozen steps
    let tau = 40.0;
    for i in 0..3 {
        let se = sigma[i] * (tau / n as f64).sqrt();
        assert!(
            (est.mean[i] - mu[i]).abs() < 4.0 * se,
            "mean {i}: {}",
            est.mean[i]
        );
        let var = sigma[i] * sigma[i];
        assert!(
            (est.cov.get(i, i) / var - 1.0).abs() < 0.1,
            "var {i}: {}",
            est.cov.get(i, i)
        );
    }
}

#[test]
fn rwm_is_reproducible_and_flags_stuck_chains() {
    let f = |z: &[f64]| -0.5 * z[0] * z[0];
    let cfg = McmcConfig::new(2000, 500);
    let a = adaptive_rwm(&f, &[0.0], &cfg, &mut stream(25, &[])).unwrap();
    let b = adaptive_rwm(&f, &[0.0], &cfg, &mut stream(25, &[])).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.acceptance, b.acceptance);

    let narrow = |z: &[f64]| -0.5 * z[0] * z[0] * 1e8;
    let stuck = McmcConfig {
        initial_scale: 10.0,
        ..McmcConfig::new(2000, 0)
    };
    let run = adaptive_rwm(&narrow, &[0.0], &stuck, &mut stream(25, &[1])).unwrap();
    assert!(run.warning && run.acceptance < 0.05);
}

// ---------------------------------------------------------------- quadrature

#[test]
fn quadrature_reproduces_the_conjugate_posterior() {
    let task = conjugate_task();
    let (m, c) = closed_form(&task);
    let lp = LogPosterior::new(&task).unwrap();
    let q = quadrature_moments(&|z| lp.eval(z), &[0.3, -0.2], 4.0).unwrap();
    let exact = moments_of(&m, &c);
    assert!(metric_m1(&q, &exact) < 1e-6);
    assert!(metric_m2(&q, &exact) < 1e-6);
}

#[test]
fn quadrature_handles_a_laplace_density() {
    // mean μ, variance 2b²
    let (mu, b) = (0.4, 0.3);
    let f = move |z: &[f64]| -(z[0] - mu).abs() / b;
    let q = quadrature_moments(&f, &[0.0], 6.0).unwrap();
    assert!((q.mean[0] - mu).abs() < 1e-6);
    assert!((q.cov.get(0, 0) - 2.0 * b * b).abs() < 1e-5);
    assert!(quadrature_moments(&f, &[0.0; 3], 1.0).is_err());
}

#[test]
fn quadrature_finds_a_posterior_narrower_than_the_grid() {
    // sd ~1e-3 against a coarse spacing of 16/600
    let mean = [0.37, -0.113];
    let cov = [[1.0e-6, 0.6e-6], [0.6e-6, 2.0e-6]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let prec = [
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ];
    let f = move |z: &[f64]| {
        let (a, b) = (z[0] - mean[0], z[1] - mean[1]);
        -0.5 * (prec[0][0] * a * a + 2.0 * prec[0][1] * a * b + prec[1][1] * b * b)
    };
    let q = quadrature_moments(&f, &[0.0, 0.0], 8.0).unwrap();
    for i in 0..2 {
        assert!((q.mean[i] - mean[i]).abs() < 1e-9, "{:?}", q.mean);
        for j in 0..2 {
            assert!(
                (q.cov.get(i, j) - cov[i][j]).abs() < 1e-6 * cov[0][0],
                "{:?}",
                q.cov
            );
        }
    }
}

// ---------------------------------------------------------------- evaluate_task

#[test]
fn evaluation_rows_cover_every_method_and_budget() {
    let (net, store) = Afin::build(ModelConfig::toy(), 3).unwrap();
    let cfg = EvalConfig {
        budgets: vec![50, 200],
        reference_samples: 500,
        mcmc_reference_iterations: 4000,
        slices: 16,
        ..EvalConfig::default()
    };
    let task = conjugate_task();
    let (rows, notices) = evaluate_task(&net, &store, &task, 0, &cfg, 5).unwrap();
    assert!(notices.is_empty());
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert_eq!(r.reference, "oracle");
        assert!(r.m1.is_finite() && r.m2.is_finite() && r.sw2 >= 0.0);
        assert!(r.entropy_ratio >= 0.0 && r.entropy_ratio <= 1.0);
        if r.method == Method::Oracle {
            assert_eq!((r.m1, r.m2), (0.0, 0.0));
        }
        if r.method == Method::AfinSnis {
            assert!(r.pareto_k.is_finite());
        } else {
            assert!(
                (r.max_weight * r.budget as f64 - 1.0).abs() < 1e-9 || r.method == Method::Mcmc
            );
        }
    }
    let again = evaluate_task(&net, &store, &task, 0, &cfg, 5).unwrap().0;
    for (a, b) in rows.iter().zip(&again) {
        assert_eq!((a.m1, a.m2, a.sw2), (b.m1, b.m2, b.sw2));
    }
    let json = serde_json::to_value(&rows[1]).unwrap();
    for key in [
        "task_id",
        "method",
        "budget",
        "m1",
        "m2",
        "sw2",
        "pareto_k",
        "max_weight",
        "entropy_ratio",
        "energy_gap",
        "wallclock_s",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["method"], "afin");
}

#[test]
fn non_conjugate_tasks_use_a_chain_reference_and_skip_the_oracle() {
    let (net, store) = Afin::build(ModelConfig::toy(), 3).unwrap();
    let task = TaskInstance::new(
        2,
        FactorSpec::prior(Theta::DiagLaplace {
            mu: vec![0.1, 0.2],
            scale: vec![0.5, 0.7],
        }),
        vec![FactorSpec::likelihood(
            Theta::BernoulliLogit {},
            Some(vec![0.4, -0.8]),
            Observation::Scalar(1.0),
        )],
        None,
    )
    .unwrap();
    let cfg = EvalConfig {
        methods: vec![Method::Afin, Method::Oracle],
        budgets: vec![100],
        reference_samples: 500,
        mcmc_reference_iterations: 5000,
        slices: 8,
        ..EvalConfig::default()
    };
    let (rows, notices) = evaluate_task(&net, &store, &task, 4, &cfg, 5).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].reference, "mcmc-rwm");
    assert_eq!(notices.len(), 1);
    assert!(notices[0].contains("oracle"));
}

#[test]
fn methods_parse_from_their_names() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("nuts".parse::<Method>().is_err());
    let bad = EvalConfig {
        budgets: vec![1],
        ..EvalConfig::default()
    };
    assert!(bad.validate().is_err());
}
