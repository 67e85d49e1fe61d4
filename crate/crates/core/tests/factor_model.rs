use afin::factor_model::{
    conjugate_posterior_oracle, log_likelihood_density, log_prior_density,
    log_unnormalized_posterior, FactorSpec, LogPosterior, Observation, TaskInstance, Theta,
};
use proptest::prelude::*;

/// `∫ f` over the real line via `z = c + tan θ`, composite Simpson on
/// `(-π/2, π/2)` split at the point `c` where `f` may have a kink.
fn integrate_line(f: impl Fn(f64) -> f64, c: f64) -> f64 {
    let half = std::f64::consts::FRAC_PI_2;
    let g = |t: f64| {
        let ct = t.cos();
        f(c + t.tan()) / (ct * ct)
    };
    simpson(&g, -half + 1e-12, 0.0, 40_000) + simpson(&g, 0.0, half - 1e-12, 40_000)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn scalar_like(theta: Theta, x: f64, y: f64) -> FactorSpec {
    FactorSpec::likelihood(theta, Some(vec![x]), Observation::Scalar(y))
}

#[test]
fn one_dimensional_priors_normalize() {
    let priors = [
        Theta::DiagGaussian {
            mu: vec![0.4],
            sigma: vec![0.6],
        },
        Theta::FullrankGaussian {
            mu: vec![-0.2],
            precision: vec![vec![2.5]],
        },
        Theta::DiagStudentT {
            mu: vec![0.1],
            sigma: vec![0.7],
            nu: 3.2,
        },
        Theta::DiagLaplace {
            mu: vec![-0.3],
            scale: vec![0.4],
        },
    ];
    for theta in priors {
        let f = FactorSpec::prior(theta.clone());
        let c = match &theta {
            Theta::DiagGaussian { mu, .. }
            | Theta::FullrankGaussian { mu, .. }
            | Theta::DiagStudentT { mu, .. }
            | Theta::DiagLaplace { mu, .. } => mu[0],
            _ => unreachable!(),
        };
        let total = integrate_line(|z| log_prior_density(&f, &[z]).unwrap().exp(), c);
        assert!((total - 1.0).abs() < 1e-6, "{theta:?}: {total}");
    }
}

#[test]
fn continuous_likelihoods_normalize_over_y() {
    let z = 0.35;
    let x = 1.7;
    let cases: Vec<(Theta, f64)> = vec![
        (Theta::LinGaussian { sigma: 0.4 }, x * z),
        (
            Theta::LinStudentT {
                sigma: 0.5,
                nu: 3.5,
            },
            x * z,
        ),
    ];
    for (theta, c) in cases {
        let total = integrate_line(
            |y| {
                log_likelihood_density(&scalar_like(theta.clone(), x, y), &[z])
                    .unwrap()
                    .exp()
            },
            c,
        );
        assert!((total - 1.0).abs() < 1e-6, "{theta:?}: {total}");
    }
    let total = integrate_line(
        |y| {
            let f = FactorSpec::likelihood(
                Theta::Gaussian { sigma: 0.3 },
                None,
                Observation::Vector(vec![y]),
            );
            log_likelihood_density(&f, &[z]).unwrap().exp()
        },
        z,
    );
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn discrete_likelihoods_sum_to_one() {
    for eta in [-4.0, -0.3, 0.0, 2.2] {
        let p: f64 = [0.0, 1.0]
            .iter()
            .map(|&y| {
                log_likelihood_density(&scalar_like(Theta::BernoulliLogit {}, 1.0, y), &[eta])
                    .unwrap()
                    .exp()
            })
            .sum();
        assert!((p - 1.0).abs() < 1e-12);
        for trials in 1..=8u32 {
            let p: f64 = (0..=trials)
                .map(|y| {
                    let f = scalar_like(Theta::BinomialLogit { trials }, 1.0, f64::from(y));
                    log_likelihood_density(&f, &[eta]).unwrap().exp()
                })
                .sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fullrank_gaussian_normalizes_on_a_grid() {
    let f = FactorSpec::prior(Theta::FullrankGaussian {
        mu: vec![0.0, 0.0],
        precision: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
    });
    let lp = log_prior_density(&f, &[1.0, 1.0]).unwrap();
    // unnormalized kernel at (1,1) is exp(-2); its integral fixes the constant
    let kernel = |a: f64, b: f64| (-(a * a + b * b)).exp();
    let n = 1200;
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / n as f64;
    let mut z = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
            z += wi * wj * kernel(lo + i as f64 * h, lo + j as f64 * h);
        }
    }
    z *= h * h;
    let expect = -2.0 - z.ln();
    assert!((lp - expect).abs() < 1e-9, "{lp} vs {expect}");

    // correlated precision: total mass over the grid
    let g = FactorSpec::prior(Theta::FullrankGaussian {
        mu: vec![0.2, -0.1],
        precision: vec![vec![1.5, 0.6], vec![0.6, 0.9]],
    });
    let n = 1000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n as f64;
    let mut mass = 0.0;
    for i in 0..=n {
        for j in 0..=n {
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
            let v = [lo + i as f64 * h, lo + j as f64 * h];
            mass += wi * wj * log_prior_density(&g, &v).unwrap().exp();
        }
    }
    assert!((mass * h * h - 1.0).abs() < 1e-6);
}

fn conjugate_task() -> TaskInstance {
    TaskInstance::new(
        2,
        FactorSpec::prior(Theta::DiagGaussian {
            mu: vec![0.2, -0.4],
            sigma: vec![0.8, 0.6],
        }),
        vec![
            scalar_like2(vec![0.5, -0.2], 0.3, 0.5),
            scalar_like2(vec![0.1, 0.7], -0.6, 0.4),
            scalar_like2(vec![-0.3, 0.3], 0.1, 0.9),
        ],
        None,
    )
    .unwrap()
}

fn scalar_like2(x: Vec<f64>, y: f64, sigma: f64) -> FactorSpec {
    FactorSpec::likelihood(
        Theta::LinGaussian { sigma },
        Some(x),
        Observation::Scalar(y),
    )
}

#[test]
fn oracle_mean_is_the_mode() {
    let task = conjugate_task();
    let post = conjugate_posterior_oracle(&task).unwrap();
    let cov = post.covariance().unwrap();
    let f = |z: &[f64]| log_unnormalized_posterior(&task, z).unwrap();
    let h = 1e-5;
    for i in 0..2 {
        let mut up = post.mean.clone();
        let mut dn = post.mean.clone();
        up[i] += h;
        dn[i] -= h;
        let grad = (f(&up) - f(&dn)) / (2.0 * h);
        assert!(grad.abs() < 1e-8, "gradient {grad} along {i}");
    }
    let peak = f(&post.mean);
    for i in 0..2 {
        for sign in [-1.0, 1.0] {
            let mut z = post.mean.clone();
            z[i] += sign * 3.0 * cov.get(i, i).sqrt();
            assert!(f(&z) < peak);
        }
    }
}

#[test]
fn oracle_matches_one_dimensional_quadrature() {
    let task = TaskInstance::new(
        1,
        FactorSpec::prior(Theta::DiagGaussian {
            mu: vec![0.0],
            sigma: vec![1.0],
        }),
        vec![scalar_like(Theta::LinGaussian { sigma: 1.0 }, 1.0, 1.0)],
        None,
    )
    .unwrap();
    let post = conjugate_posterior_oracle(&task).unwrap();
    let f = |z: f64| log_unnormalized_posterior(&task, &[z]).unwrap().exp();
    let m0 = integrate_line(f, 0.5);
    let m1 = integrate_line(|z| z * f(z), 0.5) / m0;
    let m2 = integrate_line(|z| (z - m1).powi(2) * f(z), 0.5) / m0;
    assert!((m1 - 0.5).abs() < 1e-9 && (post.mean[0] - m1).abs() < 1e-9);
    assert!((m2 - 0.5).abs() < 1e-9);
    assert!((post.covariance().unwrap().item() - m2).abs() < 1e-9);
}

#[test]
fn posterior_is_sum_of_factors() {
    let task = conjugate_task();
    let z = [0.3, 0.1];
    let direct = log_unnormalized_posterior(&task, &z).unwrap();
    let mut total = log_prior_density(&task.prior, &z).unwrap();
    for f in &task.likelihoods {
        total += log_likelihood_density(f, &z).unwrap();
    }
    assert_eq!(direct.to_bits(), total.to_bits());
    assert_eq!(
        LogPosterior::new(&task).unwrap().eval(&z).to_bits(),
        direct.to_bits()
    );
}

#[test]
fn single_likelihood_is_additive() {
    let prior = FactorSpec::prior(Theta::DiagGaussian {
        mu: vec![0.0],
        sigma: vec![1.0],
    });
    let like = scalar_like(Theta::LinGaussian { sigma: 1.0 }, 1.0, 1.0);
    let task = TaskInstance::new(1, prior.clone(), vec![like.clone()], None).unwrap();
    let z = [0.7];
    let expect =
        log_prior_density(&prior, &z).unwrap() + log_likelihood_density(&like, &z).unwrap();
    assert_eq!(log_unnormalized_posterior(&task, &z).unwrap(), expect);
}

#[test]
fn bernoulli_disagreement_lowers_density() {
    let x = vec![0.5, -0.8];
    let task = TaskInstance::new(
        2,
        FactorSpec::prior(Theta::DiagGaussian {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 1.0],
        }),
        vec![FactorSpec::likelihood(
            Theta::BernoulliLogit {},
            Some(x.clone()),
            Observation::Scalar(0.0),
        )],
        None,
    )
    .unwrap();
    // xᵀz > 0 disagrees with the label y = 0
    let z = [0.3, -0.2];
    let eta: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
    assert!(eta > 0.0);
    let f = &task.likelihoods[0];
    let near = log_likelihood_density(f, &z).unwrap();
    let far = log_likelihood_density(f, &[z[0] * 10.0, z[1] * 10.0]).unwrap();
    assert!(far < near);
    assert!(
        log_unnormalized_posterior(&task, &[3.0, -2.0]).unwrap()
            < log_unnormalized_posterior(&task, &z).unwrap()
    );
}

fn arb_task() -> impl Strategy<Value = (TaskInstance, Vec<f64>, Vec<usize>)> {
    (1usize..=5).prop_flat_map(|d| {
        let vecs = |lo: f64, hi: f64| proptest::collection::vec(lo..hi, d);
        (
            vecs(-1.0, 1.0),
            vecs(0.3, 2.0),
            vecs(-1.0, 1.0),
            proptest::collection::vec(vecs(-1.0, 1.0), d),
            vecs(-2.0, 2.0),
            Just((0..d).collect::<Vec<_>>()).prop_shuffle(),
            0usize..4,
            1u32..6,
        )
            .prop_map(move |(mu, sig, x, m, z, perm, kind, trials)| {
                let prior = match kind {
                    0 => Theta::DiagGaussian {
                        mu: mu.clone(),
                        sigma: sig.clone(),
                    },
                    1 => {
                        let mut p = vec![vec![0.0; d]; d];
                        for i in 0..d {
                            for j in 0..d {
                                p[i][j] = (0..d).map(|k| m[i][k] * m[j][k]).sum::<f64>()
                                    + if i == j { 0.5 } else { 0.0 };
                            }
                        }
                        Theta::FullrankGaussian {
                            mu: mu.clone(),
                            precision: p,
                        }
                    }
                    2 => Theta::DiagStudentT {
                        mu: mu.clone(),
                        sigma: sig.clone(),
                        nu: 4.0,
                    },
                    _ => Theta::DiagLaplace {
                        mu: mu.clone(),
                        scale: sig.clone(),
                    },
                };
                let likes = vec![
                    FactorSpec::likelihood(
                        Theta::LinGaussian { sigma: 0.7 },
                        Some(x.clone()),
                        Observation::Scalar(0.4),
                    ),
                    FactorSpec::likelihood(
                        Theta::LinStudentT {
                            sigma: 0.7,
                            nu: 5.0,
                        },
                        Some(x.clone()),
                        Observation::Scalar(-0.4),
                    ),
                    FactorSpec::likelihood(
                        Theta::BernoulliLogit {},
                        Some(x.clone()),
                        Observation::Scalar(1.0),
                    ),
                    FactorSpec::likelihood(
                        Theta::BinomialLogit { trials },
                        Some(x.clone()),
                        Observation::Scalar(1.0),
                    ),
                    FactorSpec::likelihood(
                        Theta::Gaussian { sigma: 0.5 },
                        None,
                        Observation::Vector(mu.clone()),
                    ),
                ];
                let task = TaskInstance::new(d, FactorSpec::prior(prior), likes, None).unwrap();
                (task, z, perm)
            })
    })
}

proptest! {
    #[test]
    fn coordinate_permutation_leaves_densities_invariant((task, z, perm) in arb_task()) {
        let permuted = task.permute_coordinates(&perm);
        let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
        let a = log_unnormalized_posterior(&task, &z).unwrap();
        let b = log_unnormalized_posterior(&permuted, &zp).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
        for (f, g) in task.likelihoods.iter().zip(&permuted.likelihoods) {
            let a = log_likelihood_density(f, &z).unwrap();
            let b = log_likelihood_density(g, &zp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
