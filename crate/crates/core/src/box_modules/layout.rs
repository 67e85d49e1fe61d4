//! Index plans for stacks of `T` node-pair tokens at dimension `d`.
//!
//! Node rows of token `t` are `t·d + i`; pair rows are `t·d² + i·d + j`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::tape::{GatherPlan, MixPlan};

#[derive(Debug)]
pub struct Layout {
    pub t: usize,
    pub d: usize,
    /// pair → node rows: `mean_j pair_ij`.
    pub row_mean: Arc<MixPlan>,
    /// pair → node rows: `mean_i pair_ij` (indexed by `j`).
    pub col_mean: Arc<MixPlan>,
    /// pair → node rows: `pair_ii`.
    pub diag: Arc<MixPlan>,
    /// pair → token rows: mean over all `(i, j)`.
    pub pair_mean: Arc<MixPlan>,
    /// node → token rows: mean over `i`.
    pub node_mean: Arc<MixPlan>,
    /// pair → pair: `(p_ij + p_ji)/2`.
    pub sym: Arc<MixPlan>,
    /// node → `d` rows: sum over tokens.
    pub pool_node: Arc<MixPlan>,
    /// pair → `d²` rows: sum over tokens.
    pub pool_pair: Arc<MixPlan>,
    /// Sources `[node, diag, row, col, pair_mean, node_mean]` → node rows.
    pub node_inputs: Arc<GatherPlan>,
    /// Sources `[pair, row_i, col_j, node_i, node_j, pair_mean]` → pair rows.
    pub pair_inputs: Arc<GatherPlan>,
    /// Token rows broadcast to node rows (`t·d + i ← t`).
    pub token_to_node: Arc<GatherPlan>,
    /// Coordinate rows broadcast to node rows (`t·d + i ← i`).
    pub coord_to_node: Arc<GatherPlan>,
    /// node → pair rows with `out_ii = in_i` and zeros elsewhere.
    pub diag_embed: Arc<MixPlan>,
    /// pair → pair rows with `(i, j) ← (j, i)`.
    pub pair_transpose: Arc<GatherPlan>,
}

impl Layout {
    fn build(t: usize, d: usize) -> Self {
        let d2 = d * d;
        let inv_d = 1.0 / d as f64;
        let inv_d2 = 1.0 / d2 as f64;
        let mut row = Vec::with_capacity(t * d);
        let mut col = Vec::with_capacity(t * d);
        let mut diag = Vec::with_capacity(t * d);
        for tok in 0..t {
            for i in 0..d {
                row.push((0..d).map(|j| (tok * d2 + i * d + j, inv_d)).collect());
                col.push((0..d).map(|k| (tok * d2 + k * d + i, inv_d)).collect());
                diag.push(vec![(tok * d2 + i * d + i, 1.0)]);
            }
        }
        let pair_mean = (0..t)
            .map(|tok| (0..d2).map(|r| (tok * d2 + r, inv_d2)).collect())
            .collect();
        let node_mean = (0..t)
            .map(|tok| (0..d).map(|i| (tok * d + i, inv_d)).collect())
            .collect();
        let mut sym = Vec::with_capacity(t * d2);
        for tok in 0..t {
            for i in 0..d {
                for j in 0..d {
                    let a = tok * d2 + i * d + j;
                    let b = tok * d2 + j * d + i;
                    sym.push(if i == j {
                        vec![(a, 1.0)]
                    } else {
                        vec![(a, 0.5), (b, 0.5)]
                    });
                }
            }
        }
        let pool_node = (0..d)
            .map(|i| (0..t).map(|tok| (tok * d + i, 1.0)).collect())
            .collect();
        let pool_pair = (0..d2)
            .map(|r| (0..t).map(|tok| (tok * d2 + r, 1.0)).collect())
            .collect();

        let mut node_ix: Vec<Vec<u32>> = vec![Vec::with_capacity(t * d); 6];
        let mut tok_ix = Vec::with_capacity(t * d);
        for tok in 0..t {
            for i in 0..d {
                let n = (tok * d + i) as u32;
                for k in 0..4 {
                    node_ix[k].push(n);
                }
                node_ix[4].push(tok as u32);
                node_ix[5].push(tok as u32);
                tok_ix.push(tok as u32);
            }
        }
        let coord_ix: Vec<u32> = (0..t).flat_map(|_| 0..d as u32).collect();
        let mut embed = Vec::with_capacity(t * d2);
        let mut transpose = Vec::with_capacity(t * d2);
        for tok in 0..t {
            for i in 0..d {
                for j in 0..d {
                    embed.push(if i == j {
                        vec![(tok * d + i, 1.0)]
                    } else {
                        Vec::new()
                    });
                    transpose.push((tok * d2 + j * d + i) as u32);
                }
            }
        }
        let mut pair_ix: Vec<Vec<u32>> = vec![Vec::with_capacity(t * d2); 6];
        for tok in 0..t {
            for i in 0..d {
                for j in 0..d {
                    let ni = (tok * d + i) as u32;
                    let nj = (tok * d + j) as u32;
                    pair_ix[0].push((tok * d2 + i * d + j) as u32);
                    pair_ix[1].push(ni);
                    pair_ix[2].push(nj);
                    pair_ix[3].push(ni);
                    pair_ix[4].push(nj);
                    pair_ix[5].push(tok as u32);
                }
            }
        }
        Self {
            t,
            d,
            row_mean: Arc::new(MixPlan::from_rows(t * d2, row)),
            col_mean: Arc::new(MixPlan::from_rows(t * d2, col)),
            diag: Arc::new(MixPlan::from_rows(t * d2, diag)),
            pair_mean: Arc::new(MixPlan::from_rows(t * d2, pair_mean)),
            node_mean: Arc::new(MixPlan::from_rows(t * d, node_mean)),
            sym: Arc::new(MixPlan::from_rows(t * d2, sym)),
            pool_node: Arc::new(MixPlan::from_rows(t * d, pool_node)),
            pool_pair: Arc::new(MixPlan::from_rows(t * d2, pool_pair)),
            node_inputs: Arc::new(GatherPlan {
                rows: t * d,
                index: node_ix,
            }),
            pair_inputs: Arc::new(GatherPlan {
                rows: t * d2,
                index: pair_ix,
            }),
            token_to_node: Arc::new(GatherPlan {
                rows: t * d,
                index: vec![tok_ix],
            }),
            coord_to_node: Arc::new(GatherPlan {
                rows: t * d,
                index: vec![coord_ix],
            }),
            diag_embed: Arc::new(MixPlan::from_rows(t * d, embed)),
            pair_transpose: Arc::new(GatherPlan {
                rows: t * d2,
                index: vec![transpose],
            }),
        }
    }

    /// Cached per thread.
    pub fn get(t: usize, d: usize) -> Arc<Layout> {
        thread_local! {
            static CACHE: RefCell<HashMap<(usize, usize), Arc<Layout>>> = RefCell::new(HashMap::new());
        }
        CACHE.with(|c| {
            let mut c = c.borrow_mut();
            if c.len() > 4096 {
                c.clear();
            }
            Arc::clone(
                c.entry((t, d))
                    .or_insert_with(|| Arc::new(Layout::build(t, d))),
            )
        })
    }

    pub fn node_rows(&self) -> usize {
        self.t * self.d
    }

    pub fn pair_rows(&self) -> usize {
        self.t * self.d * self.d
    }
}
