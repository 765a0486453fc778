//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A training step builds one flat tape of matrix ops; `backward` walks it in
//! reverse and accumulates gradients into parameter slots. Everything is
//! double precision and single-threaded, so forward values, gradients and
//! therefore whole training runs are reproducible bit for bit.
//!
//! Scalars are represented as `[1, 1]` matrices and row vectors as `[1, d]`.

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    /// Constant or parameter leaf; `slot` identifies the parameter for
    /// gradient collection.
    Leaf { slot: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `a[n, d] + row[1, d]`, the row added to every row of `a`.
    AddRowBroadcast(NodeId, NodeId),
    /// Elementwise `k * a + c` (only the slope matters for the gradient).
    Affine { x: NodeId, k: f64 },
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// Per-row layer normalization with learnable gain and bias rows.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Row-wise softmax of `x + mask`; the constant mask is folded in at
    /// forward time and needs no gradient.
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// `out[i, 0] = x[i, ids[i]]`.
    PickEntries { x: NodeId, ids: Vec<usize> },
    /// `out[i, :] = table[ids[i], :]`.
    Embedding { table: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    /// Sum of all entries, a `[1, 1]` scalar.
    SumAll(NodeId),
    /// Column means over rows, a `[1, d]` row.
    MeanRows(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf { slot: None }, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Mat::from_elem((1, 1), v))
    }

    /// Parameter leaf; gradients accumulate under `slot`.
    pub fn param(&mut self, value: Mat, slot: usize) -> NodeId {
        self.push(value, Op::Leaf { slot: Some(slot) }, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        let g = self.ng(a);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + self.value(row);
        let g = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRowBroadcast(a, row), g)
    }

    pub fn affine(&mut self, x: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.value(x).mapv(|t| k * t + c);
        let g = self.ng(x);
        self.push(v, Op::Affine { x, k }, g)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.affine(x, k, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::tanh);
        let g = self.ng(x);
        self.push(v, Op::Tanh(x), g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|t| t.max(0.0));
        let g = self.ng(x);
        self.push(v, Op::Relu(x), g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        let g = self.ng(x);
        self.push(v, Op::Exp(x), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut v = Mat::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let m = row.sum() / d;
            let var = row.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, t) in row.iter().enumerate() {
                v[[i, j]] = (t - m) * inv;
            }
        }
        let gv = self.value(gain);
        let bv = self.value(bias);
        debug_assert_eq!(gv.nrows(), 1);
        let v = &v * gv + bv;
        let g = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, Op::LayerNorm { x, gain, bias, eps }, g)
    }

    /// Row-wise softmax of `x + mask`; pass `None` for no mask.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<Mat>) -> NodeId {
        let xv = self.value(x);
        let mut v = match &mask {
            Some(m) => {
                debug_assert_eq!(m.dim(), xv.dim());
                xv + m
            }
            None => xv.clone(),
        };
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|t| (t - max).exp());
            let total = row.sum();
            row.mapv_inplace(|t| t / total);
        }
        let g = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), g)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|t| t - lse);
        }
        let g = self.ng(x);
        self.push(v, Op::LogSoftmaxRows(x), g)
    }

    /// Picks one entry per row: `out[i, 0] = x[i, ids[i]]`.
    pub fn pick_entries(&mut self, x: NodeId, ids: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(xv.nrows(), ids.len());
        let mut v = Mat::zeros((ids.len(), 1));
        for (i, &j) in ids.iter().enumerate() {
            v[[i, 0]] = xv[[i, j]];
        }
        let g = self.ng(x);
        self.push(v, Op::PickEntries { x, ids }, g)
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tv = self.value(table);
        let mut v = Mat::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            debug_assert!(id < tv.nrows(), "embedding id {id} out of range");
            v.row_mut(i).assign(&tv.row(id));
        }
        let g = self.ng(table);
        self.push(v, Op::Embedding { table, ids }, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let g = self.ng(x);
        self.push(v, Op::SliceRows { x, start, len }, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let g = self.ng(x);
        self.push(v, Op::SliceCols { x, start, len }, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        let g = self.ng(x);
        self.push(v, Op::SumAll(x), g)
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let v = (xv.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let g = self.ng(x);
        self.push(v, Op::MeanRows(x), g)
    }

    /// Backpropagates from a `[1, 1]` root and returns per-slot gradients.
    ///
    /// A parameter inserted more than once on the same tape accumulates into
    /// the same slot.
    pub fn backward(&mut self, root: NodeId, n_slots: usize) -> Vec<Option<Mat>> {
        debug_assert_eq!(self.nodes[root.0].value.dim(), (1, 1));
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stored below for leaves; interior nodes are done with it.
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(&mut grads, a, g.clone());
                    self.accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(&mut grads, a, g.clone());
                    self.accumulate(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * self.value(b);
                    let gb = g * self.value(a);
                    self.accumulate(&mut grads, a, ga);
                    self.accumulate(&mut grads, b, gb);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.value(b).t());
                    let gb = self.value(a).t().dot(&g);
                    self.accumulate(&mut grads, a, ga);
                    self.accumulate(&mut grads, b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.accumulate(&mut grads, a, g.t().to_owned());
                }
                Op::AddRowBroadcast(a, row) => {
                    let (a, row) = (*a, *row);
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, a, g);
                    self.accumulate(&mut grads, row, grow);
                }
                Op::Affine { x, k } => {
                    let (x, k) = (*x, *k);
                    self.accumulate(&mut grads, x, g * k);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let gx = &g * &y.mapv(|t| 1.0 - t * t);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mask = self.value(x).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(&mut grads, x, g * mask);
                }
                Op::Exp(x) => {
                    let x = *x;
                    let gx = &g * &self.nodes[i].value;
                    self.accumulate(&mut grads, x, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let xv = self.value(x);
                    let gv = self.value(gain);
                    let d = xv.ncols();
                    let df = d as f64;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    let mut ggain = Mat::zeros((1, d));
                    let mut gbias = Mat::zeros((1, d));
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let m = row.sum() / df;
                        let var = row.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|t| (t - m) * inv).collect();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            let gij = g[[r, j]];
                            ggain[[0, j]] += gij * xhat[j];
                            gbias[[0, j]] += gij;
                            dxhat[j] = gij * gv[[0, j]];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        mean_dxhat /= df;
                        mean_dxhat_xhat /= df;
                        for j in 0..d {
                            gx[[r, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(&mut grads, x, gx);
                    self.accumulate(&mut grads, gain, ggain);
                    self.accumulate(&mut grads, bias, gbias);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[r, j]] * y[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            gx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    self.accumulate(&mut grads, x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let mut gx = g.clone();
                    for r in 0..y.nrows() {
                        let gsum: f64 = (0..y.ncols()).map(|j| g[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            gx[[r, j]] -= y[[r, j]].exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, x, gx);
                }
                Op::PickEntries { x, ids } => {
                    let x = *x;
                    let ids = ids.clone();
                    let mut gx = Mat::zeros(self.value(x).raw_dim());
                    for (r, &j) in ids.iter().enumerate() {
                        gx[[r, j]] += g[[r, 0]];
                    }
                    self.accumulate(&mut grads, x, gx);
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let mut gt = Mat::zeros(self.value(table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    self.accumulate(&mut grads, table, gt);
                }
                Op::SliceRows { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut gx = Mat::zeros(self.value(x).raw_dim());
                    gx.slice_mut(ndarray::s![start..start + len, ..]).assign(&g);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut gx = Mat::zeros(self.value(x).raw_dim());
                    gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        offset += w;
                        self.accumulate(&mut grads, p, gp);
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let gx = Mat::from_elem(self.value(x).raw_dim(), g[[0, 0]]);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let xv = self.value(x);
                    let n = xv.nrows();
                    let scale = 1.0 / n as f64;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for r in 0..n {
                        for j in 0..xv.ncols() {
                            gx[[r, j]] = g[[0, j]] * scale;
                        }
                    }
                    self.accumulate(&mut grads, x, gx);
                }
            }
        }

        let mut by_slot: Vec<Option<Mat>> = (0..n_slots).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot: Some(slot) } = node.op {
                if let Some(g) = grads[i].take() {
                    match &mut by_slot[slot] {
                        Some(acc) => *acc += &g,
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        by_slot
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: NodeId, g: Mat) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}
