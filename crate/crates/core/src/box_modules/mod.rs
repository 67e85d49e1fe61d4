//! Building blocks whose parameter shapes never depend on the latent
//! dimension: coordinate-wise MLPs, invariant summaries, the node-pair
//! BoxMLP, layer normalization, factor-axis attention and the
//! BoxTransformer block.

mod layout;
mod mlp;
mod nodepair;
mod transformer;

pub use layout::Layout;
pub use mlp::{Activation, CoordinateMlp, Linear, ScalarBoxMlp};
pub use nodepair::{
    invariant_summaries, residual, symmetrize, BoxMlpNodePair, NodePair, NodePairNorm, Summaries,
    LAYER_NORM_EPS,
};
pub use transformer::{factor_axis_attention, BoxTransformerBlock};
