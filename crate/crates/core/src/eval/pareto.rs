//! Generalized Pareto tail-shape estimate of importance ratios.
//!
//! Follows the usual PSIS recipe: the largest `M = ⌈min(0.2 S, 3√S)⌉` raw
//! ratios are fitted as exceedances over the next-largest one with the
//! Zhang–Stephens profile-likelihood estimator, and the shape is shrunk
//! towards 0.5 by a weak prior worth ten observations.

/// Smallest sample size the estimate is defined for.
pub const MIN_SAMPLES: usize = 25;
/// Smallest usable tail.
pub const MIN_TAIL: usize = 5;

/// Tail length used for `s` samples.
pub fn tail_len(s: usize) -> usize {
    let s = s as f64;
    (0.2 * s).min(3.0 * s.sqrt()).ceil() as usize
}

/// `k̂` of the upper tail of `exp(log_raw_weights)`. NaN when `S < 25` or
/// the tail is too short, `−∞` when the tail does not vary.
pub fn pareto_k(log_raw_weights: &[f64]) -> f64 {
    let s = log_raw_weights.len();
    let m = tail_len(s);
    if s < MIN_SAMPLES || m < MIN_TAIL || m >= s {
        return f64::NAN;
    }
    let mut lw: Vec<f64> = log_raw_weights.to_vec();
    if lw.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    lw.sort_by(f64::total_cmp);
    let max = lw[s - 1];
    if !max.is_finite() {
        return f64::NAN;
    }
    let cutoff = lw[s - m - 1] - max;
    let exceed: Vec<f64> = lw[s - m..]
        .iter()
        .map(|v| (v - max).exp() - cutoff.exp())
        .collect();
    if exceed.iter().all(|&x| x == exceed[0]) {
        return f64::NEG_INFINITY;
    }
    gpd_fit(&exceed).0
}

/// Zhang–Stephens fit of `(k, σ)` to ascending exceedances `x`, with the
/// weakly informative prior on `k`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let grid = 30 + (nf.sqrt() as usize);
    let quartile = x[((nf / 4.0 + 0.5) as usize).max(1) - 1];
    let xmax = x[n - 1];
    let bs: Vec<f64> = (1..=grid)
        .map(|j| (1.0 - (grid as f64 / (j as f64 - 0.5)).sqrt()) / (prior * quartile) + 1.0 / xmax)
        .collect();
    let ks: Vec<f64> = bs
        .iter()
        .map(|&b| x.iter().map(|&xi| (-b * xi).ln_1p()).sum::<f64>() / nf)
        .collect();
    let ll: Vec<f64> = bs
        .iter()
        .zip(&ks)
        .map(|(&b, &k)| nf * ((-b / k).ln() - k - 1.0))
        .collect();
    // posterior weights of the grid points
    let mut w: Vec<f64> = ll
        .iter()
        .map(|li| 1.0 / ll.iter().map(|lj| (lj - li).exp()).sum::<f64>())
        .collect();
    for wi in &mut w {
        if *wi < 10.0 * f64::EPSILON || !wi.is_finite() {
            *wi = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    let b: f64 = bs.iter().zip(&w).map(|(b, w)| b * w).sum::<f64>() / total;
    let k = x.iter().map(|&xi| (-b * xi).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / b;
    let a = 10.0;
    let k = k * nf / (nf + a) + a * 0.5 / (nf + a);
    (k, sigma)
}
