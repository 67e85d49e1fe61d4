//! The encode–merge–decode network: per-type adapters, shared encoder,
//! BoxTransformer merge stack, sum pooling over factors, and Gaussian or
//! coupling-flow decoders.

mod descriptors;
mod flow;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::box_modules::{
    invariant_summaries, symmetrize, BoxMlpNodePair, BoxTransformerBlock, CoordinateMlp, Layout,
    NodePair,
};
use crate::error::{AfinError, Result};
use crate::factor_model::{FactorSpec, FactorType, GaussianDistribution, TaskInstance};
use crate::params::ParameterStore;
use crate::rng::{purpose, stream};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub use descriptors::{build_descriptors, descriptor_widths};
pub use flow::{FlowDecoder, FlowState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Gaussian,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers `S`.
    pub couplings: usize,
    pub hidden: usize,
    /// Context width `G`.
    pub context: usize,
    /// Linear layers per coupling conditioner.
    pub layers: usize,
    /// Run the flow in coordinates whitened by the Gaussian head.
    pub whiten: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            couplings: 4,
            hidden: 32,
            context: 40,
            layers: 3,
            whiten: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// BoxMLP hidden width `H`.
    pub hidden: usize,
    /// BoxMLP depth `L`.
    pub layers: usize,
    /// Merge blocks `M`.
    pub blocks: usize,
    pub heads: usize,
    pub adapter_hidden: usize,
    pub adapter_layers: usize,
    /// Floor `ε_Λ` added to the precision diagonal.
    pub precision_floor: f64,
    pub flow: Option<FlowConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper_default()
    }
}

impl ModelConfig {
    pub fn paper_default() -> Self {
        Self {
            channels: 40,
            hidden: 192,
            layers: 4,
            blocks: 4,
            heads: 4,
            adapter_hidden: 64,
            adapter_layers: 2,
            precision_floor: 1e-4,
            flow: Some(FlowConfig::default()),
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: 8,
            hidden: 32,
            layers: 2,
            blocks: 2,
            heads: 2,
            adapter_hidden: 32,
            adapter_layers: 2,
            precision_floor: 1e-4,
            flow: Some(FlowConfig {
                couplings: 4,
                hidden: 16,
                context: 8,
                layers: 3,
                whiten: true,
            }),
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper-default" | "paper_default" | "default" => Ok(Self::paper_default()),
            "toy" => Ok(Self::toy()),
            _ => Err(AfinError::Config(format!("unknown model profile {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("adapter_hidden", self.adapter_hidden),
            ("adapter_layers", self.adapter_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AfinError::Config(format!("{name} must be positive")));
            }
        }
        if self.channels % self.heads != 0 {
            return Err(AfinError::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(self.precision_floor > 0.0) {
            return Err(AfinError::Config("precision_floor must be positive".into()));
        }
        if let Some(f) = &self.flow {
            if f.couplings == 0 || f.hidden == 0 || f.context == 0 || f.layers == 0 {
                return Err(AfinError::Config("flow widths must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Adapter {
    node: CoordinateMlp,
    pair: CoordinateMlp,
}

/// Gaussian head output: mean (`d × 1`) and precision (`d × d`).
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Var,
    pub precision: Var,
}

impl GaussianHead {
    pub fn distribution(&self) -> Result<GaussianDistribution> {
        let mean = self.mean.value().data().to_vec();
        let precision = self.precision.value().clone();
        if !(mean.iter().all(|v| v.is_finite()) && precision.all_finite()) {
            return Err(AfinError::NonFinite("decoder output".into()));
        }
        GaussianDistribution::new(mean, precision)
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub d: usize,
    /// Pooled, symmetrized embedding `Ē`.
    pub pooled: NodePair,
    pub gaussian: GaussianHead,
}

/// Parameter counts by module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub adapters: Vec<(FactorType, usize)>,
    pub encoder: usize,
    pub merge: usize,
    pub gaussian_decoder: usize,
    pub flow_decoder: usize,
    pub total_gaussian: usize,
    pub total_flow: usize,
}

/// Network structure. Holds parameter ids only; values live in a
/// [`ParameterStore`] read through the graph, so EMA weights can be
/// swapped in.
#[derive(Debug, Clone)]
pub struct Afin {
    pub config: ModelConfig,
    adapters: Vec<Adapter>,
    encoder: BoxMlpNodePair,
    blocks: Vec<BoxTransformerBlock>,
    gaussian_head: BoxMlpNodePair,
    flow: Option<FlowDecoder>,
}

pub const FLOW_PREFIX: &str = "decoder.flow.";

impl Afin {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParameterStore)> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let c = config.channels;
        let adapters = FactorType::ALL
            .iter()
            .map(|&ty| {
                let (wn, wp) = descriptor_widths(ty);
                let p = format!("adapter.{}", ty.name());
                Adapter {
                    node: CoordinateMlp::new(
                        &mut store,
                        &format!("{p}.node"),
                        wn,
                        config.adapter_hidden,
                        c,
                        config.adapter_layers,
                        false,
                        rng,
                    ),
                    pair: CoordinateMlp::new(
                        &mut store,
                        &format!("{p}.pair"),
                        wp,
                        config.adapter_hidden,
                        c,
                        config.adapter_layers,
                        false,
                        rng,
                    ),
                }
            })
            .collect();
        let encoder = BoxMlpNodePair::new(
            &mut store,
            "encoder",
            c,
            c,
            c,
            config.hidden,
            config.layers,
            false,
            rng,
        );
        let blocks = (0..config.blocks)
            .map(|m| {
                BoxTransformerBlock::new(
                    &mut store,
                    &format!("merge.{m}"),
                    c,
                    config.hidden,
                    config.layers,
                    config.heads,
                    rng,
                )
            })
            .collect();
        let gaussian_head = BoxMlpNodePair::new(
            &mut store,
            "decoder.gaussian",
            c,
            2,
            1,
            config.hidden,
            config.layers,
            true,
            rng,
        );
        let flow = config
            .flow
            .as_ref()
            .map(|f| FlowDecoder::new(&mut store, "decoder.flow", c, f, rng));
        Ok((
            Self {
                config,
                adapters,
                encoder,
                blocks,
                gaussian_head,
                flow,
            },
            store,
        ))
    }

    /// Construction with the initialization stream of `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        Self::new(config, &mut stream(seed, &[purpose::INIT]))
    }

    pub fn flow(&self) -> Option<&FlowDecoder> {
        self.flow.as_ref()
    }

    /// Adapter outputs for a group of factors of type `ty`, stacked as
    /// tokens; pair part symmetrized.
    pub fn adapt(
        &self,
        g: &Graph,
        ty: FactorType,
        factors: &[&FactorSpec],
        d: usize,
    ) -> Result<NodePair> {
        let (wn, wp) = descriptor_widths(ty);
        let t = factors.len();
        let mut node = Vec::with_capacity(t * d * wn);
        let mut pair = Vec::with_capacity(t * d * d * wp);
        for f in factors {
            if f.factor_type() != ty {
                return Err(AfinError::InvalidFactor(format!(
                    "factor of type {} in {ty} group",
                    f.factor_type()
                )));
            }
            let (n, p) = build_descriptors(f, d)?;
            node.extend_from_slice(n.data());
            pair.extend_from_slice(p.data());
        }
        let a = &self.adapters[ty.index()];
        let lay = Layout::get(t, d);
        let node = a
            .node
            .forward(g, &g.constant(Tensor::from_vec(t * d, wn, node)));
        let pair = a
            .pair
            .forward(g, &g.constant(Tensor::from_vec(t * d * d, wp, pair)));
        Ok(NodePair {
            node,
            pair: symmetrize(g, &lay, &pair),
        })
    }

    fn encode_stack(&self, g: &Graph, lay: &Layout, e: &NodePair) -> NodePair {
        self.encoder.forward_residual(g, lay, e)
    }

    /// `E⁽⁰⁾` of a single factor.
    pub fn encode_factor(&self, g: &Graph, factor: &FactorSpec, d: usize) -> Result<NodePair> {
        let e = self.adapt(g, factor.factor_type(), &[factor], d)?;
        Ok(self.encode_stack(g, &Layout::get(1, d), &e))
    }

    /// `E⁽⁰⁾` of every factor of the task, tokens grouped by type.
    pub fn encode_task(&self, g: &Graph, task: &TaskInstance) -> Result<(NodePair, Arc<Layout>)> {
        let d = task.d;
        let mut nodes = Vec::new();
        let mut pairs = Vec::new();
        let mut t = 0;
        for ty in FactorType::ALL {
            let group: Vec<&FactorSpec> =
                task.factors().filter(|f| f.factor_type() == ty).collect();
            if group.is_empty() {
                continue;
            }
            t += group.len();
            let e = self.adapt(g, ty, &group, d)?;
            nodes.push(e.node);
            pairs.push(e.pair);
        }
        let lay = Layout::get(t, d);
        let e = if nodes.len() == 1 {
            NodePair {
                node: nodes.pop().unwrap(),
                pair: pairs.pop().unwrap(),
            }
        } else {
            NodePair {
                node: g.concat_rows(&nodes.iter().collect::<Vec<_>>()),
                pair: g.concat_rows(&pairs.iter().collect::<Vec<_>>()),
            }
        };
        Ok((self.encode_stack(g, &lay, &e), lay))
    }

    pub fn merge(&self, g: &Graph, lay: &Layout, mut e: NodePair) -> NodePair {
        for b in &self.blocks {
            e = b.forward(g, lay, &e);
        }
        e
    }

    /// `Ē = Σ_n E_n`, pair part symmetrized again.
    pub fn pool(&self, g: &Graph, lay: &Layout, e: &NodePair) -> NodePair {
        let lay1 = Layout::get(1, lay.d);
        NodePair {
            node: g.mix(&e.node, &lay.pool_node),
            pair: symmetrize(g, &lay1, &g.mix(&e.pair, &lay.pool_pair)),
        }
    }

    /// `μ` from the node head; `Λ = S Sᵀ + diag(softplus(D) + ε_Λ)` with
    /// `S = sym(P)` from the pair head.
    pub fn decode_gaussian(&self, g: &Graph, pooled: &NodePair) -> GaussianHead {
        let d = pooled.node.rows();
        let lay1 = Layout::get(1, d);
        let s = invariant_summaries(g, &lay1, pooled);
        let node = self.gaussian_head.node_increment(g, &lay1, pooled, &s);
        let pair = self.gaussian_head.pair_increment(g, &lay1, pooled, &s);
        let mean = g.slice_cols(&node, 0, 1);
        let diag = g.add_const(
            &g.softplus(&g.slice_cols(&node, 1, 1)),
            self.config.precision_floor,
        );
        let sq = g.reshape(&symmetrize(g, &lay1, &pair), d, d);
        let ss = g.matmul_nt(&sq, &sq);
        let ss = g.scale(&g.add(&ss, &g.transpose(&ss)), 0.5);
        let precision = g.add(&ss, &g.reshape(&g.mix(&diag, &lay1.diag_embed), d, d));
        GaussianHead { mean, precision }
    }

    /// Pooled embedding for a task.
    pub fn embed(&self, g: &Graph, task: &TaskInstance) -> Result<NodePair> {
        let (e, lay) = self.encode_task(g, task)?;
        let e = self.merge(g, &lay, e);
        Ok(self.pool(g, &lay, &e))
    }

    pub fn forward(&self, g: &Graph, task: &TaskInstance) -> Result<Forward> {
        let pooled = self.embed(g, task)?;
        let gaussian = self.decode_gaussian(g, &pooled);
        Ok(Forward {
            d: task.d,
            pooled,
            gaussian,
        })
    }

    /// Gaussian posterior approximation with the weights in `store`.
    pub fn posterior(
        &self,
        store: &ParameterStore,
        task: &TaskInstance,
    ) -> Result<GaussianDistribution> {
        let g = Graph::inference(store);
        self.forward(&g, task)?.gaussian.distribution()
    }

    /// Flow state on top of a forward pass.
    pub fn decode_flow(&self, g: &Graph, fwd: &Forward) -> Result<FlowState> {
        let flow = self
            .flow
            .as_ref()
            .ok_or_else(|| AfinError::Config("model has no flow decoder".into()))?;
        Ok(flow.decode(g, &fwd.pooled, &fwd.gaussian))
    }

    /// `log q(z)` (`1 × 1`) under the chosen decoder.
    pub fn log_prob(
        &self,
        g: &Graph,
        fwd: &Forward,
        variant: DecoderVariant,
        z: &[f64],
    ) -> Result<Var> {
        if z.len() != fwd.d {
            return Err(AfinError::Shape(format!(
                "z has length {}, expected {}",
                z.len(),
                fwd.d
            )));
        }
        match variant {
            DecoderVariant::Gaussian => {
                let zc = g.constant(Tensor::column(z.to_vec()));
                Ok(g.gaussian_log_density(&zc, &fwd.gaussian.mean, &fwd.gaussian.precision))
            }
            DecoderVariant::Flow => {
                let state = self.decode_flow(g, fwd)?;
                let flow = self.flow.as_ref().unwrap();
                Ok(flow.log_prob(g, &state, &Tensor::from_vec(1, fwd.d, z.to_vec())))
            }
        }
    }

    /// Which parameters a variant trains. The Gaussian variant leaves the
    /// flow decoder untouched.
    pub fn trainable_mask(&self, store: &ParameterStore, variant: DecoderVariant) -> Vec<bool> {
        store
            .infos()
            .iter()
            .map(|i| variant == DecoderVariant::Flow || !i.name.starts_with(FLOW_PREFIX))
            .collect()
    }

    pub fn count_parameters(&self, store: &ParameterStore) -> ParamCounts {
        let adapters: Vec<(FactorType, usize)> = FactorType::ALL
            .iter()
            .map(|&ty| {
                (
                    ty,
                    store.numel_with_prefix(&format!("adapter.{}.", ty.name())),
                )
            })
            .collect();
        let adapter_total: usize = adapters.iter().map(|a| a.1).sum();
        let encoder = store.numel_with_prefix("encoder.");
        let merge = store.numel_with_prefix("merge.");
        let gaussian_decoder = store.numel_with_prefix("decoder.gaussian.");
        let flow_decoder = store.numel_with_prefix(FLOW_PREFIX);
        let total_gaussian = adapter_total + encoder + merge + gaussian_decoder;
        ParamCounts {
            adapters,
            encoder,
            merge,
            gaussian_decoder,
            flow_decoder,
            total_gaussian,
            total_flow: total_gaussian + flow_decoder,
        }
    }
}
