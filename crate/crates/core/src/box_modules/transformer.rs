use rand::Rng;

use super::layout::Layout;
use super::nodepair::{residual, BoxMlpNodePair, NodePair, NodePairNorm};
use crate::params::{Init, ParamId, ParameterStore};
use crate::tape::{Graph, Var};

/// Multi-head attention across the token (factor) axis. Scores average
/// over coordinates: `S_node = d⁻¹ Σ_i ⟨q_i, k_i⟩` and
/// `S_pair = d⁻² Σ_ij ⟨q_ij, k_ij⟩`, mixed as
/// `softmax((λ_node S_node + λ_pair S_pair)/√u)`.
pub fn factor_axis_attention(
    g: &Graph,
    lay: &Layout,
    q: &NodePair,
    k: &NodePair,
    v: &NodePair,
    lambda_node: &Var,
    lambda_pair: &Var,
    heads: usize,
) -> NodePair {
    let (t, d) = (lay.t, lay.d);
    let width = q.channels();
    assert_eq!(width % heads, 0, "channel width must divide into heads");
    let u = width / heads;
    let inv_sqrt_u = 1.0 / (u as f64).sqrt();
    let mut node_heads = Vec::with_capacity(heads);
    let mut pair_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let tokens = |x: &Var, per: usize| g.reshape(&g.slice_cols(x, h * u, u), t, per * u);
        let qn = tokens(&q.node, d);
        let kn = tokens(&k.node, d);
        let qp = tokens(&q.pair, d * d);
        let kp = tokens(&k.pair, d * d);
        let s_node = g.scale(&g.matmul_nt(&qn, &kn), 1.0 / d as f64);
        let s_pair = g.scale(&g.matmul_nt(&qp, &kp), 1.0 / (d * d) as f64);
        let logits = g.add(
            &g.scale_by(&s_node, lambda_node),
            &g.scale_by(&s_pair, lambda_pair),
        );
        let a = g.softmax_rows(&g.scale(&logits, inv_sqrt_u));
        let vn = tokens(&v.node, d);
        let vp = tokens(&v.pair, d * d);
        node_heads.push(g.reshape(&g.matmul(&a, &vn), t * d, u));
        pair_heads.push(g.reshape(&g.matmul(&a, &vp), t * d * d, u));
    }
    if heads == 1 {
        return NodePair {
            node: node_heads.pop().unwrap(),
            pair: pair_heads.pop().unwrap(),
        };
    }
    NodePair {
        node: g.concat_cols(&node_heads.iter().collect::<Vec<_>>()),
        pair: g.concat_cols(&pair_heads.iter().collect::<Vec<_>>()),
    }
}

/// Pre-norm transformer block whose projections and feed-forward map are
/// node-pair BoxMLPs.
#[derive(Debug, Clone)]
pub struct BoxTransformerBlock {
    pub norm1: NodePairNorm,
    pub q_map: BoxMlpNodePair,
    pub k_map: BoxMlpNodePair,
    pub v_map: BoxMlpNodePair,
    pub out_map: BoxMlpNodePair,
    pub norm2: NodePairNorm,
    pub ffn_map: BoxMlpNodePair,
    pub lambda_node: ParamId,
    pub lambda_pair: ParamId,
    pub heads: usize,
}

impl BoxTransformerBlock {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        c: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(c % heads, 0, "channel width must divide into heads");
        let map = |store: &mut ParameterStore, name: &str, rng: &mut _| {
            BoxMlpNodePair::new(
                store,
                &format!("{prefix}.{name}"),
                c,
                c,
                c,
                hidden,
                layers,
                false,
                rng,
            )
        };
        Self {
            norm1: NodePairNorm::new(store, &format!("{prefix}.ln1"), c, rng),
            q_map: map(store, "q", rng),
            k_map: map(store, "k", rng),
            v_map: map(store, "v", rng),
            out_map: map(store, "out", rng),
            norm2: NodePairNorm::new(store, &format!("{prefix}.ln2"), c, rng),
            ffn_map: map(store, "ffn", rng),
            lambda_node: store.register(
                format!("{prefix}.lambda_node"),
                1,
                1,
                Init::Constant(1.0),
                rng,
            ),
            lambda_pair: store.register(
                format!("{prefix}.lambda_pair"),
                1,
                1,
                Init::Constant(1.0),
                rng,
            ),
            heads,
        }
    }

    pub fn forward(&self, g: &Graph, lay: &Layout, e: &NodePair) -> NodePair {
        let x = self.norm1.forward(g, e);
        let q = self.q_map.increment(g, lay, &x);
        let k = self.k_map.increment(g, lay, &x);
        let v = self.v_map.increment(g, lay, &x);
        let mixed = factor_axis_attention(
            g,
            lay,
            &q,
            &k,
            &v,
            &g.param(self.lambda_node),
            &g.param(self.lambda_pair),
            self.heads,
        );
        let e1 = residual(g, lay, e, &self.out_map.increment(g, lay, &mixed));
        let x2 = self.norm2.forward(g, &e1);
        residual(g, lay, &e1, &self.ffn_map.increment(g, lay, &x2))
    }
}
