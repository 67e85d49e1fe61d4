use rand::Rng;

use super::layout::Layout;
use super::mlp::CoordinateMlp;
use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{Graph, Var};

/// Node tensor (`T·d × C`) and pair tensor (`T·d² × C`) for a stack of `T`
/// tokens sharing one dimension `d`.
#[derive(Debug, Clone)]
pub struct NodePair {
    pub node: Var,
    pub pair: Var,
}

impl NodePair {
    pub fn channels(&self) -> usize {
        self.node.cols()
    }
}

/// Permutation-invariant summaries of each token.
#[derive(Debug, Clone)]
pub struct Summaries {
    /// `mean_j pair_ij`, one row per `(t, i)`.
    pub row: Var,
    /// `mean_i pair_ij`, one row per `(t, j)`.
    pub col: Var,
    /// `pair_ii`.
    pub diag: Var,
    /// Mean over all pairs, one row per token.
    pub global_pair: Var,
    /// Mean over coordinates, one row per token.
    pub global_node: Var,
}

pub fn invariant_summaries(g: &Graph, lay: &Layout, e: &NodePair) -> Summaries {
    Summaries {
        row: g.mix(&e.pair, &lay.row_mean),
        col: g.mix(&e.pair, &lay.col_mean),
        diag: g.mix(&e.pair, &lay.diag),
        global_pair: g.mix(&e.pair, &lay.pair_mean),
        global_node: g.mix(&e.node, &lay.node_mean),
    }
}

/// `(p_ij + p_ji) / 2` within each token.
pub fn symmetrize(g: &Graph, lay: &Layout, pair: &Var) -> Var {
    g.mix(pair, &lay.sym)
}

/// Node-pair BoxMLP: a node branch on
/// `[node_i, diag_i, row_i, col_i, global_pair, global_node]` and a pair
/// branch on `[pair_ij, row_i, col_j, node_i, node_j, global_pair]`.
#[derive(Debug, Clone)]
pub struct BoxMlpNodePair {
    pub node_branch: CoordinateMlp,
    pub pair_branch: CoordinateMlp,
}

impl BoxMlpNodePair {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        c_in: usize,
        node_out: usize,
        pair_out: usize,
        hidden: usize,
        layers: usize,
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            node_branch: CoordinateMlp::new(
                store,
                &format!("{prefix}.node"),
                6 * c_in,
                hidden,
                node_out,
                layers,
                zero_last,
                rng,
            ),
            pair_branch: CoordinateMlp::new(
                store,
                &format!("{prefix}.pair"),
                6 * c_in,
                hidden,
                pair_out,
                layers,
                zero_last,
                rng,
            ),
        }
    }

    /// Node branch output only.
    pub fn node_increment(&self, g: &Graph, lay: &Layout, e: &NodePair, s: &Summaries) -> Var {
        self.node_branch.forward_gathered(
            g,
            &[
                &e.node,
                &s.diag,
                &s.row,
                &s.col,
                &s.global_pair,
                &s.global_node,
            ],
            &lay.node_inputs,
        )
    }

    /// Pair branch output only (not symmetrized).
    pub fn pair_increment(&self, g: &Graph, lay: &Layout, e: &NodePair, s: &Summaries) -> Var {
        self.pair_branch.forward_gathered(
            g,
            &[&e.pair, &s.row, &s.col, &e.node, &e.node, &s.global_pair],
            &lay.pair_inputs,
        )
    }

    /// Raw branch outputs with no residual and no symmetrization.
    pub fn increment(&self, g: &Graph, lay: &Layout, e: &NodePair) -> NodePair {
        let s = invariant_summaries(g, lay, e);
        NodePair {
            node: self.node_increment(g, lay, e, &s),
            pair: self.pair_increment(g, lay, e, &s),
        }
    }

    /// `node + Δnode`, `sym(pair + Δpair)`.
    pub fn forward_residual(&self, g: &Graph, lay: &Layout, e: &NodePair) -> NodePair {
        let inc = self.increment(g, lay, e);
        residual(g, lay, e, &inc)
    }

    /// `forward_residual` when `residual` is set, `increment` otherwise.
    pub fn forward(&self, g: &Graph, lay: &Layout, e: &NodePair, residual: bool) -> NodePair {
        if residual {
            self.forward_residual(g, lay, e)
        } else {
            self.increment(g, lay, e)
        }
    }
}

/// `node + Δnode`, `sym(pair + Δpair)`.
pub fn residual(g: &Graph, lay: &Layout, e: &NodePair, inc: &NodePair) -> NodePair {
    NodePair {
        node: g.add(&e.node, &inc.node),
        pair: symmetrize(g, lay, &g.add(&e.pair, &inc.pair)),
    }
}

/// Channel-wise layer normalization with separate node and pair gains.
#[derive(Debug, Clone)]
pub struct NodePairNorm {
    pub node_gain: ParamId,
    pub node_bias: ParamId,
    pub pair_gain: ParamId,
    pub pair_bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl NodePairNorm {
    pub fn new(store: &mut ParameterStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            node_gain: store.register(
                format!("{prefix}.node.gain"),
                1,
                c,
                Init::Constant(1.0),
                rng,
            ),
            node_bias: store.register(format!("{prefix}.node.bias"), 1, c, Init::Zeros, rng),
            pair_gain: store.register(
                format!("{prefix}.pair.gain"),
                1,
                c,
                Init::Constant(1.0),
                rng,
            ),
            pair_bias: store.register(format!("{prefix}.pair.bias"), 1, c, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &Graph, e: &NodePair) -> NodePair {
        NodePair {
            node: g.layer_norm(
                &e.node,
                &g.param(self.node_gain),
                &g.param(self.node_bias),
                LAYER_NORM_EPS,
            ),
            pair: g.layer_norm(
                &e.pair,
                &g.param(self.pair_gain),
                &g.param(self.pair_bias),
                LAYER_NORM_EPS,
            ),
        }
    }
}
