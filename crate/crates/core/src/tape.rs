//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Graph`] records every operation applied to [`Var`]s. Calling
//! [`Graph::backward`] walks the record in reverse and returns exact
//! gradients for every parameter leaf. A graph built with
//! [`Graph::inference`] records nothing, so intermediate values are freed as
//! soon as their `Var` is dropped; the same model code serves both modes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::params::{GradBuffer, ParamId, ParameterStore};
use crate::tensor::{gemm, Tensor};

const UNTRACKED: usize = usize::MAX;

/// Handle to a value computed on a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Unary {
    /// tanh approximation of GELU.
    Gelu,
    Softplus,
    Tanh,
    Exp,
    Ln,
}

/// Sparse linear map over rows: `out[r] = Σ w · in[src]`.
#[derive(Debug)]
pub struct MixPlan {
    pub in_rows: usize,
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, f64)>,
}

impl MixPlan {
    pub fn from_rows(in_rows: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for row in rows {
            for (src, w) in row {
                debug_assert!(src < in_rows);
                entries.push((src as u32, w));
            }
            offsets.push(entries.len());
        }
        Self {
            in_rows,
            offsets,
            entries,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Row gather from several sources, concatenated along columns:
/// `out[r] = [src_0[idx_0[r]], src_1[idx_1[r]], ...]`.
#[derive(Debug)]
pub struct GatherPlan {
    pub rows: usize,
    pub index: Vec<Vec<u32>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    ScaleBy(usize, usize),
    Unary(usize, Unary),
    Reshape(usize),
    Transpose(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(Vec<usize>, Arc<GatherPlan>),
    GatherSum(Vec<usize>, Arc<GatherPlan>),
    Mix(usize, Arc<MixPlan>),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    SumAll(usize),
    GaussianLogDensity {
        z: usize,
        mean: usize,
        precision: usize,
    },
    Cholesky(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    /// Some parameter lies upstream.
    grad: bool,
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScaleBy(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Unary(x, _)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::Mix(x, _)
            | Op::SoftmaxRows(x)
            | Op::SumAll(x)
            | Op::Cholesky(x) => f(*x),
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::Gather(v, _) | Op::GatherSum(v, _) => {
                v.iter().for_each(|&i| f(i))
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::GaussianLogDensity { z, mean, precision } => {
                f(*z);
                f(*mean);
                f(*precision);
            }
        }
    }
}

/// Operation recorder bound to one parameter store.
pub struct Graph<'a> {
    store: &'a ParameterStore,
    record: bool,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<'a> Graph<'a> {
    /// Recording graph for gradient computation.
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store,
            record: true,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    /// Non-recording graph: forward values only.
    pub fn inference(store: &'a ParameterStore) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let value = Arc::new(value);
        if !self.record {
            return Var {
                id: UNTRACKED,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let mut grad = false;
        op.for_each_input(|i| grad |= i != UNTRACKED && nodes[i].grad);
        nodes.push(Node {
            value: Arc::clone(&value),
            op,
            grad,
        });
        Var { id, value }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return v.clone();
        }
        let value = self.store.shared(id);
        let var = if self.record {
            let mut nodes = self.nodes.borrow_mut();
            let nid = nodes.len();
            nodes.push(Node {
                value: Arc::clone(&value),
                op: Op::Param(id),
                grad: true,
            });
            Var { id: nid, value }
        } else {
            Var {
                id: UNTRACKED,
                value,
            }
        };
        self.params.borrow_mut().insert(id, var.clone());
        var
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        let out = a.value.matmul(&b.value);
        self.push(out, Op::MatMul(a.id, b.id))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: &Var, b: &Var) -> Var {
        let (m, k) = a.shape();
        let (n, k2) = b.shape();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            a.value.data(),
            k,
            1,
            b.value.data(),
            1,
            k,
            0.0,
            out.data_mut(),
        );
        self.push(out, Op::MatMulNT(a.id, b.id))
    }

    fn zip(&self, a: &Var, b: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let data = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(a.rows(), a.cols(), data)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a.id, b.id))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a.id, b.id))
    }

    /// `x + 1·bᵀ` for a `1×c` row `b`.
    pub fn add_row(&self, x: &Var, b: &Var) -> Var {
        assert_eq!(b.rows(), 1);
        assert_eq!(x.cols(), b.cols(), "add_row width mismatch");
        let mut out = (*x.value).clone();
        let br = b.value.data();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(br) {
                *o += *bv;
            }
        }
        self.push(out, Op::AddRow(x.id, b.id))
    }

    /// Scales each row of `x` by the matching entry of the `r×1` column `s`.
    pub fn mul_col(&self, x: &Var, s: &Var) -> Var {
        assert_eq!(s.cols(), 1);
        assert_eq!(x.rows(), s.rows(), "mul_col height mismatch");
        let mut out = (*x.value).clone();
        for r in 0..out.rows() {
            let f = s.value.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::MulCol(x.id, s.id))
    }

    pub fn scale(&self, x: &Var, c: f64) -> Var {
        let out = x.value.map(|v| v * c);
        self.push(out, Op::Scale(x.id, c))
    }

    pub fn add_const(&self, x: &Var, c: f64) -> Var {
        let out = x.value.map(|v| v + c);
        self.push(out, Op::AddConst(x.id))
    }

    /// `x · s` for a `1×1` variable `s`.
    pub fn scale_by(&self, x: &Var, s: &Var) -> Var {
        let c = s.item();
        let out = x.value.map(|v| v * c);
        self.push(out, Op::ScaleBy(x.id, s.id))
    }

    pub fn unary(&self, x: &Var, kind: Unary) -> Var {
        let out = match kind {
            Unary::Gelu => x.value.map(gelu),
            Unary::Softplus => x.value.map(softplus),
            Unary::Tanh => x.value.map(f64::tanh),
            Unary::Exp => x.value.map(f64::exp),
            Unary::Ln => x.value.map(f64::ln),
        };
        self.push(out, Op::Unary(x.id, kind))
    }

    pub fn gelu(&self, x: &Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&self, x: &Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn tanh(&self, x: &Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&self, x: &Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: &Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn reshape(&self, x: &Var, rows: usize, cols: usize) -> Var {
        let out = (*x.value).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(x.id))
    }

    pub fn transpose(&self, x: &Var) -> Var {
        self.push(x.value.transpose(), Op::Transpose(x.id))
    }

    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Var {
        let (r, c) = x.shape();
        assert!(start + len <= c, "column slice out of range");
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&x.value.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x.id, start))
    }

    pub fn slice_rows(&self, x: &Var, start: usize, len: usize) -> Var {
        let (r, c) = x.shape();
        assert!(start + len <= r, "row slice out of range");
        let out = Tensor::from_vec(
            len,
            c,
            x.value.data()[start * c..(start + len) * c].to_vec(),
        );
        self.push(out, Op::SliceRows(x.id, start))
    }

    pub fn concat_cols(&self, parts: &[&Var]) -> Var {
        let rows = parts[0].rows();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows(), rows, "concat_cols height mismatch");
                let w = p.cols();
                out.row_mut(r)[off..off + w].copy_from_slice(p.value.row(r));
                off += w;
            }
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(&self, parts: &[&Var]) -> Var {
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(p.value.data());
            rows += p.rows();
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn gather(&self, srcs: &[&Var], plan: &Arc<GatherPlan>) -> Var {
        assert_eq!(srcs.len(), plan.index.len());
        let cols: usize = srcs.iter().map(|s| s.cols()).sum();
        let mut out = Tensor::zeros(plan.rows, cols);
        for r in 0..plan.rows {
            let row = out.row_mut(r);
            let mut off = 0;
            for (s, idx) in srcs.iter().zip(&plan.index) {
                let w = s.cols();
                row[off..off + w].copy_from_slice(s.value.row(idx[r] as usize));
                off += w;
            }
        }
        self.push(
            out,
            Op::Gather(srcs.iter().map(|s| s.id).collect(), Arc::clone(plan)),
        )
    }

    /// Like [`Graph::gather`] but sums the gathered rows instead of
    /// concatenating them; all sources share one width.
    pub fn gather_sum(&self, srcs: &[&Var], plan: &Arc<GatherPlan>) -> Var {
        assert_eq!(srcs.len(), plan.index.len());
        let w = srcs[0].cols();
        let mut out = Tensor::zeros(plan.rows, w);
        for (s, idx) in srcs.iter().zip(&plan.index) {
            assert_eq!(s.cols(), w, "gather_sum width mismatch");
            for r in 0..plan.rows {
                for (o, v) in out.row_mut(r).iter_mut().zip(s.value.row(idx[r] as usize)) {
                    *o += v;
                }
            }
        }
        self.push(
            out,
            Op::GatherSum(srcs.iter().map(|s| s.id).collect(), Arc::clone(plan)),
        )
    }

    pub fn mix(&self, x: &Var, plan: &Arc<MixPlan>) -> Var {
        assert_eq!(x.rows(), plan.in_rows, "mix plan input height mismatch");
        let c = x.cols();
        let mut out = Tensor::zeros(plan.out_rows(), c);
        for r in 0..plan.out_rows() {
            let row = out.row_mut(r);
            for &(src, w) in &plan.entries[plan.offsets[r]..plan.offsets[r + 1]] {
                for (o, v) in row.iter_mut().zip(x.value.row(src as usize)) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::Mix(x.id, Arc::clone(plan)))
    }

    pub fn softmax_rows(&self, x: &Var) -> Var {
        let mut out = (*x.value).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxRows(x.id))
    }

    /// Per-row normalization over columns with learned `1×c` gain and bias.
    pub fn layer_norm(&self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Var {
        let (r, c) = x.shape();
        assert_eq!(gain.shape(), (1, c));
        assert_eq!(bias.shape(), (1, c));
        let mut out = Tensor::zeros(r, c);
        let g = gain.value.data();
        let b = bias.value.data();
        for i in 0..r {
            let row = x.value.row(i);
            let (mean, inv) = row_stats(row, eps);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (row[k] - mean) * inv * g[k] + b[k];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
        )
    }

    pub fn sum_all(&self, x: &Var) -> Var {
        let s = x.value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.id))
    }

    /// `log N(z; mean, precision⁻¹)` for column vectors `z`, `mean` and a
    /// symmetric precision. Returns NaN when the precision is not positive
    /// definite.
    pub fn gaussian_log_density(&self, z: &Var, mean: &Var, precision: &Var) -> Var {
        let d = z.rows();
        assert_eq!(z.shape(), (d, 1));
        assert_eq!(mean.shape(), (d, 1));
        assert_eq!(precision.shape(), (d, d));
        let lam = to_dmatrix(&precision.value);
        let value = match lam.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                let logdet: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
                let r: Vec<f64> = z
                    .value
                    .data()
                    .iter()
                    .zip(mean.value.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let mut quad = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        quad += r[i] * lam[(i, j)] * r[j];
                    }
                }
                -0.5 * d as f64 * (2.0 * PI).ln() + 0.5 * logdet - 0.5 * quad
            }
            None => f64::NAN,
        };
        self.push(
            Tensor::scalar(value),
            Op::GaussianLogDensity {
                z: z.id,
                mean: mean.id,
                precision: precision.id,
            },
        )
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix (NaN
    /// filled when factorization fails).
    pub fn cholesky(&self, a: &Var) -> Var {
        let d = a.rows();
        assert_eq!(a.shape(), (d, d));
        let out = match to_dmatrix(&a.value).cholesky() {
            Some(ch) => from_dmatrix(&ch.l()),
            None => Tensor::filled(d, d, f64::NAN),
        };
        self.push(out, Op::Cholesky(a.id))
    }

    /// Exact gradients of the scalar `out` (times `seed`) with respect to
    /// every parameter reached by the record.
    pub fn backward(&self, out: &Var, seed: f64) -> Vec<(ParamId, Tensor)> {
        let mut result = Vec::new();
        self.backward_with(out, seed, |pid, g| result.push((pid, g)));
        result
    }

    fn backward_with(&self, out: &Var, seed: f64, mut sink: impl FnMut(ParamId, Tensor)) {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(out.shape(), (1, 1), "backward needs a scalar output");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let needs: Vec<bool> = nodes.iter().map(|n| n.grad).collect();
        if !needs[out.id] {
            return;
        }
        grads[out.id] = Some(Tensor::scalar(seed));
        for id in (0..=out.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => sink(*pid, gout),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    if let Some(ga) = slot(&mut grads, &needs, *a, m, k) {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            gout.data(),
                            n,
                            1,
                            bv.data(),
                            1,
                            n,
                            1.0,
                            ga.data_mut(),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, &needs, *b, k, n) {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            av.data(),
                            1,
                            k,
                            gout.data(),
                            n,
                            1,
                            1.0,
                            gb.data_mut(),
                        );
                    }
                }
                Op::MatMulNT(a, b) => {
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = av.shape();
                    let n = bv.rows();
                    if let Some(ga) = slot(&mut grads, &needs, *a, m, k) {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            gout.data(),
                            n,
                            1,
                            bv.data(),
                            k,
                            1,
                            1.0,
                            ga.data_mut(),
                        );
                    }
                    if let Some(gb) = slot(&mut grads, &needs, *b, n, k) {
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            gout.data(),
                            1,
                            n,
                            av.data(),
                            k,
                            1,
                            1.0,
                            gb.data_mut(),
                        );
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &needs, *b, gout.clone());
                    accumulate(&mut grads, &needs, *a, gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &needs, *b, gout.map(|v| -v));
                    accumulate(&mut grads, &needs, *a, gout);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&gout, val(*b), |g, y| g * y);
                    let gb = elementwise(&gout, val(*a), |g, x| g * x);
                    accumulate(&mut grads, &needs, *a, ga);
                    accumulate(&mut grads, &needs, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let mut gb = Tensor::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, g) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, &needs, *b, gb);
                    accumulate(&mut grads, &needs, *x, gout);
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (val(*x), val(*s));
                    let mut gx = gout.clone();
                    let mut gs = Tensor::zeros(sv.rows(), 1);
                    for r in 0..gout.rows() {
                        let f = sv.data()[r];
                        let mut acc = 0.0;
                        for (gxv, (g, xe)) in gx
                            .row_mut(r)
                            .iter_mut()
                            .zip(gout.row(r).iter().zip(xv.row(r)))
                        {
                            *gxv = g * f;
                            acc += g * xe;
                        }
                        gs.data_mut()[r] = acc;
                    }
                    accumulate(&mut grads, &needs, *x, gx);
                    accumulate(&mut grads, &needs, *s, gs);
                }
                Op::Scale(x, c) => accumulate(&mut grads, &needs, *x, gout.map(|v| v * c)),
                Op::AddConst(x) => accumulate(&mut grads, &needs, *x, gout),
                Op::ScaleBy(x, s) => {
                    let c = val(*s).item();
                    let gs: f64 = gout
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, v)| g * v)
                        .sum();
                    accumulate(&mut grads, &needs, *s, Tensor::scalar(gs));
                    accumulate(&mut grads, &needs, *x, gout.map(|v| v * c));
                }
                Op::Unary(x, kind) => {
                    let xv = val(*x);
                    let yv = &node.value;
                    let gx = match kind {
                        Unary::Gelu => elementwise(&gout, xv, |g, x| g * gelu_grad(x)),
                        Unary::Softplus => elementwise(&gout, xv, |g, x| g * sigmoid(x)),
                        Unary::Tanh => elementwise(&gout, yv, |g, y| g * (1.0 - y * y)),
                        Unary::Exp => elementwise(&gout, yv, |g, y| g * y),
                        Unary::Ln => elementwise(&gout, xv, |g, x| g / x),
                    };
                    accumulate(&mut grads, &needs, *x, gx);
                }
                Op::Reshape(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads, &needs, *x, gout.reshaped(r, c));
                }
                Op::Transpose(x) => accumulate(&mut grads, &needs, *x, gout.transpose()),
                Op::SliceCols(x, start) => {
                    let (r, c) = val(*x).shape();
                    let w = gout.cols();
                    if let Some(gx) = slot(&mut grads, &needs, *x, r, c) {
                        for i in 0..r {
                            add_into(&mut gx.row_mut(i)[*start..*start + w], gout.row(i));
                        }
                    }
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = val(*x).shape();
                    if let Some(gx) = slot(&mut grads, &needs, *x, r, c) {
                        add_into(
                            &mut gx.data_mut()[start * c..start * c + gout.len()],
                            gout.data(),
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, w) = val(p).shape();
                        if let Some(gp) = slot(&mut grads, &needs, p, r, w) {
                            for i in 0..r {
                                add_into(gp.row_mut(i), &gout.row(i)[off..off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        let (r, c) = val(p).shape();
                        let gp = Tensor::from_vec(r, c, gout.data()[off..off + n].to_vec());
                        off += n;
                        accumulate(&mut grads, &needs, p, gp);
                    }
                }
                Op::Gather(srcs, plan) => {
                    let mut off = 0;
                    for (&s, idx) in srcs.iter().zip(&plan.index) {
                        let (r, w) = val(s).shape();
                        if let Some(gs) = slot(&mut grads, &needs, s, r, w) {
                            for (o, &src) in idx.iter().enumerate() {
                                add_into(gs.row_mut(src as usize), &gout.row(o)[off..off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherSum(srcs, plan) => {
                    for (&s, idx) in srcs.iter().zip(&plan.index) {
                        let (r, w) = val(s).shape();
                        if let Some(gs) = slot(&mut grads, &needs, s, r, w) {
                            for (o, &src) in idx.iter().enumerate() {
                                add_into(gs.row_mut(src as usize), gout.row(o));
                            }
                        }
                    }
                }
                Op::Mix(x, plan) => {
                    let c = gout.cols();
                    if let Some(gx) = slot(&mut grads, &needs, *x, plan.in_rows, c) {
                        for r in 0..plan.out_rows() {
                            let g = gout.row(r);
                            for &(src, w) in &plan.entries[plan.offsets[r]..plan.offsets[r + 1]] {
                                for (d, gv) in gx.row_mut(src as usize).iter_mut().zip(g) {
                                    *d += w * gv;
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = gout.row(r).iter().zip(y.row(r)).map(|(g, v)| g * v).sum();
                        for ((o, g), v) in gx.row_mut(r).iter_mut().zip(gout.row(r)).zip(y.row(r)) {
                            *o = v * (g - dot);
                        }
                    }
                    accumulate(&mut grads, &needs, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = val(*x);
                    let g = val(*gain).data();
                    let (r, c) = xv.shape();
                    let mut gx = Tensor::zeros(r, c);
                    let mut gg = Tensor::zeros(1, c);
                    let mut gb = Tensor::zeros(1, c);
                    let mut xhat = vec![0.0; c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let row = xv.row(i);
                        let (mean, inv) = row_stats(row, *eps);
                        let go = gout.row(i);
                        for k in 0..c {
                            xhat[k] = (row[k] - mean) * inv;
                            dxhat[k] = go[k] * g[k];
                            gg.data_mut()[k] += go[k] * xhat[k];
                            gb.data_mut()[k] += go[k];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (k, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv * (dxhat[k] - m1 - xhat[k] * m2);
                        }
                    }
                    accumulate(&mut grads, &needs, *x, gx);
                    accumulate(&mut grads, &needs, *gain, gg);
                    accumulate(&mut grads, &needs, *bias, gb);
                }
                Op::SumAll(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads, &needs, *x, Tensor::filled(r, c, gout.item()));
                }
                Op::GaussianLogDensity { z, mean, precision } => {
                    let g = gout.item();
                    let lam = to_dmatrix(val(*precision));
                    let d = lam.nrows();
                    let r: Vec<f64> = val(*z)
                        .data()
                        .iter()
                        .zip(val(*mean).data())
                        .map(|(a, b)| a - b)
                        .collect();
                    let mut lr = vec![0.0; d];
                    for i in 0..d {
                        lr[i] = (0..d).map(|j| lam[(i, j)] * r[j]).sum();
                    }
                    let inv = lam
                        .clone()
                        .cholesky()
                        .map(|c| c.inverse())
                        .unwrap_or_else(|| DMatrix::from_element(d, d, f64::NAN));
                    let mut gl = Tensor::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            gl.set(i, j, g * 0.5 * (inv[(i, j)] - r[i] * r[j]));
                        }
                    }
                    let gz = Tensor::column(lr.iter().map(|v| -g * v).collect());
                    let gm = Tensor::column(lr.iter().map(|v| g * v).collect());
                    accumulate(&mut grads, &needs, *z, gz);
                    accumulate(&mut grads, &needs, *mean, gm);
                    accumulate(&mut grads, &needs, *precision, gl);
                }
                Op::Cholesky(a) => {
                    let ga = cholesky_backward(&node.value, &gout);
                    accumulate(&mut grads, &needs, *a, ga);
                }
            }
        }
    }

    /// Runs [`Graph::backward`] and adds `scale ×` the result into `buf`.
    pub fn backward_into(&self, out: &Var, scale: f64, buf: &mut GradBuffer) {
        self.backward_with(out, scale, |pid, g| buf.tensors[pid].add_assign(&g));
    }
}

fn accumulate(grads: &mut [Option<Tensor>], needs: &[bool], id: usize, g: Tensor) {
    if id == UNTRACKED || !needs[id] {
        return;
    }
    match &mut grads[id] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradient slot of `id`, zero-filled on first use; `None` when no gradient
/// is wanted there.
fn slot<'a>(
    grads: &'a mut [Option<Tensor>],
    needs: &[bool],
    id: usize,
    rows: usize,
    cols: usize,
) -> Option<&'a mut Tensor> {
    if id == UNTRACKED || !needs[id] {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(rows, cols)))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

/// `½(1 + tanh u) = σ(2u)`, one `exp` instead of a `tanh`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            t.set(i, j, m[(i, j)]);
        }
    }
    t
}

/// Reverse pass of `L = chol(A)` for symmetric `A`; returns the symmetric
/// gradient `½(S + Sᵀ)` with `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, where `Φ` keeps the lower
/// triangle and halves the diagonal.
fn cholesky_backward(l: &Tensor, gl: &Tensor) -> Tensor {
    let d = l.rows();
    let lm = to_dmatrix(l);
    let mut lbar = to_dmatrix(gl);
    // only the lower triangle of L is an output
    for i in 0..d {
        for j in (i + 1)..d {
            lbar[(i, j)] = 0.0;
        }
    }
    let mut p = lm.transpose() * &lbar;
    for i in 0..d {
        for j in (i + 1)..d {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    let linv = match lm.clone().try_inverse() {
        Some(m) => m,
        None => return Tensor::filled(d, d, f64::NAN),
    };
    let s = linv.transpose() * p * &linv;
    let sym = (&s + s.transpose()) * 0.5;
    from_dmatrix(&sym)
}
