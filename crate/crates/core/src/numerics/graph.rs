//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! referenced from the [`ParameterStore`] rather than copied; `backward`
//! walks the tape in reverse and returns one gradient buffer per parameter.

use crate::error::{Error, Result};

use super::matrix::dot;
use super::softmax::{log_sum_exp, masked_softmax_rows, sigmoid, softplus, Mask};
use super::{Matrix, ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Matrix),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    PairSum(NodeId, NodeId),
    PairContract(NodeId, NodeId),
    LogSoftmaxPick {
        x: NodeId,
        keep: Vec<bool>,
        index: usize,
    },
    BceWithLogits {
        x: NodeId,
        picks: Vec<(usize, bool)>,
    },
    Sum(NodeId),
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParameterStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        match &self.nodes[id.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => self.store.value(*p),
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input (no gradient flows out of the graph through it).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: NodeId, k: Matrix) -> Result<NodeId> {
        let v = self.value(a).hadamard(&k)?;
        Ok(self.push(v, Op::MulConst(a, k)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&Mask>) -> Result<NodeId> {
        let v = masked_softmax_rows(self.value(a), mask)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::Shape(format!("gather row {bad} of {}", src.rows())));
        }
        let v = src.gather_rows(idx);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let d = xv.cols() as f64;
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..row.len() {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// All pairwise row sums: output row `i * b.rows + j` is `a_i + b_j`.
    pub fn pair_sum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape("pair_sum widths differ".into()));
        }
        let (n, m, d) = (av.rows(), bv.rows(), av.cols());
        let mut out = Matrix::zeros(n * m, d);
        for i in 0..n {
            let ai = av.row(i);
            for j in 0..m {
                let o = out.row_mut(i * m + j);
                for ((x, &p), &q) in o.iter_mut().zip(ai).zip(bv.row(j)) {
                    *x = p + q;
                }
            }
        }
        Ok(self.push(out, Op::PairSum(a, b)))
    }

    /// Blockwise weighted sum over pair rows: with `w` holding `n * m` weights
    /// (any shape) and `p` of shape `(n * m) x d`, output row `i` is
    /// `sum_j w[i * m + j] * p[i * m + j]`. `m` is inferred as `p.rows / n`
    /// where `n = out_rows`.
    pub fn pair_contract(&mut self, w: NodeId, p: NodeId, out_rows: usize) -> Result<NodeId> {
        let (wv, pv) = (self.value(w), self.value(p));
        if out_rows == 0 || wv.len() != pv.rows() || pv.rows() % out_rows != 0 {
            return Err(Error::Shape(format!(
                "pair_contract: {} weights, {} pair rows, {out_rows} outputs",
                wv.len(),
                pv.rows()
            )));
        }
        let m = pv.rows() / out_rows;
        let mut out = Matrix::zeros(out_rows, pv.cols());
        let wd = wv.data();
        for i in 0..out_rows {
            let o = out.row_mut(i);
            for j in 0..m {
                let k = wd[i * m + j];
                if k == 0.0 {
                    continue;
                }
                for (x, &y) in o.iter_mut().zip(pv.row(i * m + j)) {
                    *x += k * y;
                }
            }
        }
        Ok(self.push(out, Op::PairContract(w, p)))
    }

    /// `log softmax(x)[index]` over the kept entries of `x` taken as a flat vector.
    pub fn log_softmax_pick(&mut self, x: NodeId, keep: &[bool], index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if keep.len() != xv.len() || index >= xv.len() {
            return Err(Error::Shape("log_softmax_pick mask/index".into()));
        }
        if !keep[index] {
            return Err(Error::InvalidArgument(format!(
                "picked index {index} is masked"
            )));
        }
        let lse = log_sum_exp(xv.data(), keep)?;
        let v = xv.data()[index] - lse;
        Ok(self.push(
            Matrix::filled(1, 1, v),
            Op::LogSoftmaxPick {
                x,
                keep: keep.to_vec(),
                index,
            },
        ))
    }

    /// Summed binary cross-entropy of selected logits (flat index, label).
    pub fn bce_with_logits(&mut self, x: NodeId, picks: Vec<(usize, bool)>) -> Result<NodeId> {
        let xv = self.value(x);
        if picks.iter().any(|&(i, _)| i >= xv.len()) {
            return Err(Error::Shape("bce index out of range".into()));
        }
        let total: f64 = picks
            .iter()
            .map(|&(i, y)| {
                let z = xv.data()[i];
                if y {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum();
        Ok(self.push(Matrix::filled(1, 1, total), Op::BceWithLogits { x, picks }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(Matrix::filled(1, 1, v), Op::Sum(a))
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter of
    /// the store (zero for parameters the loss does not touch).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Matrix>> {
        let mut param_grads = self.store.zeros_like();
        self.backward_into(loss, &mut param_grads)?;
        Ok(param_grads)
    }

    /// Like [`Graph::backward`], accumulating into existing buffers.
    pub fn backward_into(&self, loss: NodeId, param_grads: &mut [Matrix]) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = match &node.value {
                Value::Owned(m) => m,
                Value::Param(p) => self.store.value(*p),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => param_grads[p.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_t(bv)?);
                    accumulate(&mut grads, *b, av.t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    // out = A B^T: dA = G B, dB = G^T A
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul(bv)?);
                    accumulate(&mut grads, *b, g.t_matmul(av)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in rg.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *row, rg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, k) => accumulate(&mut grads, *a, g.hadamard(k)?),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip_with(out, |gi, y| gi * (1.0 - y * y))),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip_with(out, |gi, y| gi * y * (1.0 - y))),
                Op::Relu(a) => accumulate(
                    &mut grads,
                    *a,
                    g.zip_with(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
                ),
                Op::Softmax(a) => {
                    // dx = y * (g - <g, y>) per row; masked entries have y = 0
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), out.row(r));
                        let inner = dot(gr, yr);
                        for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                            *x = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let w = src.cols();
                    ga.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, rows)?);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, cols)?);
                        offset += cols;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = g.cols() as f64;
                    let mut dgain = Matrix::zeros(1, g.cols());
                    let mut dbias = Matrix::zeros(1, g.cols());
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..gr.len() {
                            dgain.data_mut()[c] += gr[c] * hr[c];
                            dbias.data_mut()[c] += gr[c];
                            let dh = gr[c] * gv.get(0, c);
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let is = inv_std[r];
                        let row = dx.row_mut(r);
                        for c in 0..gr.len() {
                            let dh = gr[c] * gv.get(0, c);
                            row[c] = is * (dh - sum_dh / d - hr[c] * sum_dh_h / d);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::PairSum(a, b) => {
                    let (n, m) = (self.value(*a).rows(), self.value(*b).rows());
                    let d = g.cols();
                    let mut ga = Matrix::zeros(n, d);
                    let mut gb = Matrix::zeros(m, d);
                    for i in 0..n {
                        for j in 0..m {
                            let gr = g.row(i * m + j);
                            for (x, y) in ga.row_mut(i).iter_mut().zip(gr) {
                                *x += y;
                            }
                            for (x, y) in gb.row_mut(j).iter_mut().zip(gr) {
                                *x += y;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::PairContract(w, p) => {
                    let (wv, pv) = (self.value(*w), self.value(*p));
                    let n = g.rows();
                    let m = pv.rows() / n;
                    let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                    let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                    for i in 0..n {
                        let gr = g.row(i);
                        for j in 0..m {
                            let k = i * m + j;
                            gw.data_mut()[k] = dot(gr, pv.row(k));
                            let wk = wv.data()[k];
                            if wk != 0.0 {
                                for (x, y) in gp.row_mut(k).iter_mut().zip(gr) {
                                    *x += wk * y;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *p, gp);
                }
                Op::LogSoftmaxPick { x, keep, index } => {
                    let xv = self.value(*x);
                    let lse = log_sum_exp(xv.data(), keep)?;
                    let g0 = g.get(0, 0);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, v) in gx.data_mut().iter_mut().enumerate() {
                        if keep[k] {
                            let p = (xv.data()[k] - lse).exp();
                            *v = g0 * (if k == *index { 1.0 } else { 0.0 } - p);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::BceWithLogits { x, picks } => {
                    let xv = self.value(*x);
                    let g0 = g.get(0, 0);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for &(i, y) in picks {
                        let p = sigmoid(xv.data()[i]);
                        gx.data_mut()[i] += g0 * (p - if y { 1.0 } else { 0.0 });
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(src.rows(), src.cols(), g.get(0, 0)));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
