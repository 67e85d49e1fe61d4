//! Conditional coupling flow on top of the pooled embedding.
//!
//! Sampling maps `ε ~ N(0, I)` through `S` masked affine couplings, then
//! `x = exp(ℓ) ⊙ v + τ`, and (when whitening) `z = μ + L⁻ᵀ x` with
//! `L = chol(Λ)` from the Gaussian head. Coupling `s` keeps coordinates
//! with `(i + s)` even fixed and conditions on them through
//! `[c^node_i, m_i v_i, m_i, d⁻¹ Σ_j c^pair_ij m_j v_j, mean_j m_j v_j]`.

use rand::Rng;

use super::{FlowConfig, GaussianHead};
use crate::box_modules::{
    invariant_summaries, symmetrize, BoxMlpNodePair, CoordinateMlp, Layout, NodePair,
};
use crate::tape::{to_dmatrix, Graph, Var};
use crate::tensor::Tensor;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
/// Bound on the coupling log-scales: `s = B tanh(raw / B)`.
const COUPLING_SCALE_BOUND: f64 = 2.0;
/// Bound on the final affine log-scale.
const AFFINE_SCALE_BOUND: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct FlowDecoder {
    context: BoxMlpNodePair,
    affine: CoordinateMlp,
    couplings: Vec<CoordinateMlp>,
    g: usize,
    whiten: bool,
}

/// Per-task flow parameters.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub d: usize,
    /// `d × G`.
    pub context_node: Var,
    /// Symmetric pair context reshaped to `d × (d·G)`.
    pub context_pair: Var,
    /// `d × 1`.
    pub tau: Var,
    /// `d × 1`.
    pub log_scale: Var,
    /// `(μ, L)` when whitening.
    pub whitening: Option<(Var, Var)>,
}

fn bounded(g: &Graph, raw: &Var, bound: f64) -> Var {
    g.scale(&g.tanh(&g.scale(raw, 1.0 / bound)), bound)
}

impl FlowDecoder {
    pub fn new(
        store: &mut crate::params::ParameterStore,
        prefix: &str,
        c: usize,
        cfg: &FlowConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let g = cfg.context;
        Self {
            context: BoxMlpNodePair::new(
                store,
                &format!("{prefix}.context"),
                c,
                g,
                g,
                cfg.hidden,
                2,
                false,
                rng,
            ),
            affine: CoordinateMlp::new(
                store,
                &format!("{prefix}.affine"),
                6 * c,
                cfg.hidden,
                2,
                2,
                true,
                rng,
            ),
            couplings: (0..cfg.couplings)
                .map(|s| {
                    CoordinateMlp::new(
                        store,
                        &format!("{prefix}.coupling.{s}"),
                        2 * g + 3,
                        cfg.hidden,
                        2,
                        cfg.layers,
                        true,
                        rng,
                    )
                })
                .collect(),
            g,
            whiten: cfg.whiten,
        }
    }

    pub fn couplings(&self) -> usize {
        self.couplings.len()
    }

    pub fn decode(&self, g: &Graph, pooled: &NodePair, gaussian: &GaussianHead) -> FlowState {
        let d = pooled.node.rows();
        let lay1 = Layout::get(1, d);
        let s = invariant_summaries(g, &lay1, pooled);
        let context_node = self.context.node_increment(g, &lay1, pooled, &s);
        let pair = symmetrize(g, &lay1, &self.context.pair_increment(g, &lay1, pooled, &s));
        // symmetric, so row j of this reshape holds c_ij for all i
        let context_pair = g.reshape(&pair, d, d * self.g);
        let aff = self.affine.forward_gathered(
            g,
            &[
                &pooled.node,
                &s.diag,
                &s.row,
                &s.col,
                &s.global_pair,
                &s.global_node,
            ],
            &lay1.node_inputs,
        );
        let tau = g.slice_cols(&aff, 0, 1);
        let log_scale = bounded(g, &g.slice_cols(&aff, 1, 1), AFFINE_SCALE_BOUND);
        let whitening = self
            .whiten
            .then(|| (gaussian.mean.clone(), g.cholesky(&gaussian.precision)));
        FlowState {
            d,
            context_node,
            context_pair,
            tau,
            log_scale,
            whitening,
        }
    }

    /// Log-scale and shift of coupling `s` for a stack of `k` vectors
    /// `v` (`k·d × 1`), both zero on conditioning coordinates.
    fn conditioner(&self, g: &Graph, st: &FlowState, s: usize, v: &Var, k: usize) -> (Var, Var) {
        let d = st.d;
        let lay = Layout::get(k, d);
        let mask: Vec<f64> = (0..k * d)
            .map(|r| ((r % d + s) % 2 == 0) as u8 as f64)
            .collect();
        let free = g.constant(Tensor::column(mask.iter().map(|m| 1.0 - m).collect()));
        let mask = g.constant(Tensor::column(mask));
        let w = g.mul(v, &mask);
        let wk = g.reshape(&w, k, d);
        let cn = g.gather(&[&st.context_node], &lay.coord_to_node);
        let cp = g.scale(
            &g.reshape(&g.matmul(&wk, &st.context_pair), k * d, self.g),
            1.0 / d as f64,
        );
        let mean = g.matmul(&wk, &g.constant(Tensor::filled(d, 1, 1.0 / d as f64)));
        let mean = g.gather(&[&mean], &lay.token_to_node);
        let feat = g.concat_cols(&[&cn, &w, &mask, &cp, &mean]);
        let out = self.couplings[s].forward(g, &feat);
        let log_s = g.mul(
            &bounded(g, &g.slice_cols(&out, 0, 1), COUPLING_SCALE_BOUND),
            &free,
        );
        let shift = g.mul(&g.slice_cols(&out, 1, 1), &free);
        (log_s, shift)
    }

    /// Per-row sums of a `k·d × 1` column, as `k × 1`.
    fn row_sums(g: &Graph, x: &Var, k: usize, d: usize) -> Var {
        g.matmul(&g.reshape(x, k, d), &g.constant(Tensor::filled(d, 1, 1.0)))
    }

    /// `log q(z)` for each row of `z` (`k × d`), as `k × 1`.
    pub fn log_prob(&self, g: &Graph, st: &FlowState, z: &Tensor) -> Var {
        let (k, d) = z.shape();
        assert_eq!(d, st.d);
        let lay = Layout::get(k, d);
        let zc = g.constant(z.clone());
        let (x, log_det_w) = match &st.whitening {
            Some((mu, l)) => {
                let centred = g.add_row(&zc, &g.scale(&g.transpose(mu), -1.0));
                let ldiag = g.mix(&g.reshape(l, d * d, 1), &Layout::get(1, d).diag);
                (g.matmul(&centred, l), Some(g.sum_all(&g.ln(&ldiag))))
            }
            None => (zc, None),
        };
        let tau = g.gather(&[&st.tau], &lay.coord_to_node);
        let ell = g.gather(&[&st.log_scale], &lay.coord_to_node);
        let mut v = g.mul(
            &g.sub(&g.reshape(&x, k * d, 1), &tau),
            &g.exp(&g.scale(&ell, -1.0)),
        );
        let mut log_det = g.scale(&g.sum_all(&st.log_scale), -1.0);
        let mut per_row: Option<Var> = None;
        for s in (0..self.couplings.len()).rev() {
            let (ls, sh) = self.conditioner(g, st, s, &v, k);
            v = g.mul(&g.sub(&v, &sh), &g.exp(&g.scale(&ls, -1.0)));
            let r = Self::row_sums(g, &ls, k, d);
            per_row = Some(match per_row {
                Some(p) => g.add(&p, &r),
                None => r,
            });
        }
        if let Some(w) = log_det_w {
            log_det = g.add(&log_det, &w);
        }
        let base = g.add_const(
            &g.scale(&Self::row_sums(g, &g.mul(&v, &v), k, d), -0.5),
            -0.5 * d as f64 * LOG_2PI,
        );
        let mut out = g.add_row(&base, &log_det);
        if let Some(p) = per_row {
            out = g.sub(&out, &p);
        }
        out
    }

    /// Pushes base draws `eps` (`k × d`) through the flow. Returns the
    /// samples and their log densities. Intended for inference graphs.
    pub fn sample(&self, g: &Graph, st: &FlowState, eps: &Tensor) -> (Tensor, Vec<f64>) {
        let (k, d) = eps.shape();
        assert_eq!(d, st.d);
        let lay = Layout::get(k, d);
        let mut v = g.constant(eps.clone().reshaped(k * d, 1));
        let mut log_det = vec![0.0; k];
        for s in 0..self.couplings.len() {
            let (ls, sh) = self.conditioner(g, st, s, &v, k);
            v = g.add(&g.mul(&v, &g.exp(&ls)), &sh);
            for (r, ld) in log_det.iter_mut().enumerate() {
                *ld += ls.value().data()[r * d..(r + 1) * d].iter().sum::<f64>();
            }
        }
        let tau = g.gather(&[&st.tau], &lay.coord_to_node);
        let ell = g.gather(&[&st.log_scale], &lay.coord_to_node);
        let x = g.add(&g.mul(&v, &g.exp(&ell)), &tau);
        let sum_ell: f64 = st.log_scale.value().data().iter().sum();
        let mut z = x.value().clone().reshaped(k, d);
        let mut log_det_w = 0.0;
        if let Some((mu, l)) = &st.whitening {
            let l = to_dmatrix(l.value());
            let lt = l.transpose();
            log_det_w = (0..d).map(|i| l[(i, i)].ln()).sum();
            for r in 0..k {
                let xr = nalgebra::DVector::from_column_slice(z.row(r));
                let u = lt
                    .solve_upper_triangular(&xr)
                    .unwrap_or_else(|| nalgebra::DVector::from_element(d, f64::NAN));
                for i in 0..d {
                    z.set(r, i, mu.value().data()[i] + u[i]);
                }
            }
        }
        let log_q = (0..k)
            .map(|r| {
                let e = eps.row(r);
                let base = -0.5 * e.iter().map(|x| x * x).sum::<f64>() - 0.5 * d as f64 * LOG_2PI;
                base - log_det[r] - sum_ell + log_det_w
            })
            .collect();
        (z, log_q)
    }
}
