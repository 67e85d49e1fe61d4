use std::sync::Arc;

use rand::Rng;

use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{gelu, GatherPlan, Graph, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::FanInUniform
        };
        let w = store.register(format!("{prefix}.w"), fan_in, fan_out, init, rng);
        let b = store.register(format!("{prefix}.b"), 1, fan_out, Init::Zeros, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        g.add_row(&g.matmul(x, &g.param(self.w)), &g.param(self.b))
    }
}

/// Shared MLP applied row by row, so the same weights serve every
/// coordinate (or coordinate pair) of any dimension `d`. GELU between
/// layers, none after the last.
#[derive(Debug, Clone)]
pub struct CoordinateMlp {
    pub layers: Vec<Linear>,
}

impl CoordinateMlp {
    /// `layers` linear maps `c_in → hidden → … → hidden → c_out`. With
    /// `zero_last` the output layer starts at zero.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        layers: usize,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layers >= 1, "an MLP needs at least one layer");
        let mut dims = vec![c_in];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(c_out);
        let layers = (0..layers)
            .map(|k| {
                let last = k + 1 == dims.len() - 1;
                Linear::new(
                    store,
                    &format!("{prefix}.{k}"),
                    dims[k],
                    dims[k + 1],
                    zero_last && last,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn c_out(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let h = self.layers[0].forward(g, x);
        self.finish(g, h)
    }

    /// Continues from the pre-activation of the first layer.
    fn finish(&self, g: &Graph, mut h: Var) -> Var {
        for layer in &self.layers[1..] {
            h = layer.forward(g, &g.gelu(&h));
        }
        h
    }

    /// Same result as `forward(gather(sources, plan))` with the gather
    /// moved after the first matrix product, which is then taken at each
    /// source's own (smaller) row count.
    pub fn forward_gathered(&self, g: &Graph, sources: &[&Var], plan: &Arc<GatherPlan>) -> Var {
        let first = &self.layers[0];
        let w = g.param(first.w);
        let mut off = 0;
        let mut parts = Vec::with_capacity(sources.len());
        for s in sources {
            let c = s.cols();
            parts.push(g.matmul(s, &g.slice_rows(&w, off, c)));
            off += c;
        }
        assert_eq!(off, first.fan_in, "gathered input width mismatch");
        let refs: Vec<&Var> = parts.iter().collect();
        let h = g.add_row(&g.gather_sum(&refs, plan), &g.param(first.b));
        self.finish(g, h)
    }
}

/// Pointwise nonlinearity of the scalar BoxMLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Parameters of the one-hidden-layer scalar BoxMLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarBoxMlp {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub omega: Vec<f64>,
    pub delta: f64,
    pub activation: Activation,
}

impl ScalarBoxMlp {
    /// `o_j = δ + Σ_ℓ ω_ℓ σ(γ_ℓ + α_ℓ z_j + β_ℓ mean(z))`.
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        z.iter()
            .map(|&zj| {
                let mut o = self.delta;
                for l in 0..self.alpha.len() {
                    let pre = self.gamma[l] + self.alpha[l] * zj + self.beta[l] * mean;
                    o += self.omega[l] * self.activation.apply(pre);
                }
                o
            })
            .collect()
    }
}
