//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records one forward computation as an arena of nodes; calling
//! [`Tape::backward`] walks the arena in reverse and accumulates gradients
//! for every node that transitively depends on a trainable leaf. The op set
//! is exactly what the encoder-decoder model needs, nothing more.

use crate::mat::Mat;
use crate::scalar::{log_add, Scalar};

pub type NodeId = usize;

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// m×n plus a broadcast 1×n row.
    AddRow(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        ids: Vec<usize>,
    },
    /// T×C -> T_out×(kernel·C) patch extraction for conv-as-matmul.
    Unfold1d {
        x: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Same-padded stride-1 depthwise conv; weight is kernel×C.
    DepthwiseConv1d {
        x: NodeId,
        w: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    /// Replace the listed rows with a broadcast 1×n fill vector.
    MaskRowsWith {
        x: NodeId,
        fill: NodeId,
        rows: Vec<usize>,
    },
    SumAll(NodeId),
    CtcLoss {
        logp: NodeId,
        targets: Vec<usize>,
        blank: usize,
    },
    /// Label-smoothed cross-entropy over log-probability rows; `rows`
    /// restricts the loss to a subset of rows when present.
    CeLoss {
        logp: NodeId,
        targets: Vec<usize>,
        smoothing: T,
        rows: Option<Vec<usize>>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].value.shape(), (1, 1));
        self.nodes[id].value.at(0, 0)
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Mat<T>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        v.add_assign(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape(), bv.shape());
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Mat::from_vec(av.rows(), av.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let rv = &self.nodes[row].value;
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols());
        let mut v = av.clone();
        for r in 0..v.rows() {
            let dst = v.row_mut(r);
            for (d, &b) in dst.iter_mut().zip(rv.row(0).iter()) {
                *d += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.shape(), bv.shape());
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Mat::from_vec(av.rows(), av.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MulElem(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * sigmoid_scalar(x));
        let ng = self.needs(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut v = av.clone();
        for r in 0..v.rows() {
            softmax_row(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let mut v = av.clone();
        for r in 0..v.rows() {
            log_softmax_row(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), xv.cols());
        assert_eq!(b.cols(), xv.cols());
        let n = T::of_usize(xv.cols());
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (d, val) in row.iter_mut().enumerate() {
                *val = g.at(0, d) * (*val - mean) * inv + b.at(0, d);
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(v, Op::LayerNormRows { x, gain, bias, eps }, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(start + len <= xv.cols());
        let mut v = Mat::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = Mat::zeros(ids.len(), xv.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(xv.row(id));
        }
        let ng = self.needs(x);
        self.push(
            v,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Output row `t` holds the concatenation of input rows
    /// `t*stride - pad + k` for `k in 0..kernel`, zero outside bounds.
    pub fn unfold1d(&mut self, x: NodeId, kernel: usize, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let t_in = xv.rows();
        let c = xv.cols();
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let mut v = Mat::zeros(t_out, kernel * c);
        for t in 0..t_out {
            for k in 0..kernel {
                let src = t * stride + k;
                if src < pad || src - pad >= t_in {
                    continue;
                }
                let row = xv.row(src - pad);
                v.row_mut(t)[k * c..(k + 1) * c].copy_from_slice(row);
            }
        }
        let ng = self.needs(x);
        self.push(
            v,
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let kernel = wv.rows();
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        assert_eq!(wv.cols(), xv.cols());
        let pad = (kernel - 1) / 2;
        let t_len = xv.rows();
        let c = xv.cols();
        let mut v = Mat::zeros(t_len, c);
        for t in 0..t_len {
            for k in 0..kernel {
                let src = t + k;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xrow = xv.row(src - pad);
                let wrow = wv.row(k);
                let orow = v.row_mut(t);
                for d in 0..c {
                    orow[d] += wrow[d] * xrow[d];
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(v, Op::DepthwiseConv1d { x, w }, ng)
    }

    /// Inverted dropout; `mask` entries are either 0 or 1/(1-p).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<T>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(mask.len(), xv.data().len());
        let data: Vec<T> = xv
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let v = Mat::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.needs(x);
        self.push(v, Op::Dropout { x, mask }, ng)
    }

    pub fn mask_rows_with(&mut self, x: NodeId, fill: NodeId, rows: &[usize]) -> NodeId {
        let fv = &self.nodes[fill].value;
        assert_eq!(fv.rows(), 1);
        assert_eq!(fv.cols(), self.nodes[x].value.cols());
        let fill_row: Vec<T> = fv.row(0).to_vec();
        let mut v = self.nodes[x].value.clone();
        for &r in rows {
            v.row_mut(r).copy_from_slice(&fill_row);
        }
        let ng = self.needs(x) || self.needs(fill);
        self.push(
            v,
            Op::MaskRowsWith {
                x,
                fill,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.nodes[x].value.data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(x), ng)
    }

    /// CTC negative log-likelihood of `targets` given per-frame
    /// log-posteriors. Infeasible targets produce `+inf` with zero gradient.
    pub fn ctc_loss(&mut self, logp: NodeId, targets: &[usize], blank: usize) -> NodeId {
        let lp = &self.nodes[logp].value;
        let loss = ctc_forward(lp, targets, blank);
        let ng = self.needs(logp);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CtcLoss {
                logp,
                targets: targets.to_vec(),
                blank,
            },
            ng,
        )
    }

    /// Mean label-smoothed cross-entropy over the selected rows of a
    /// log-probability matrix.
    pub fn ce_loss(
        &mut self,
        logp: NodeId,
        targets: &[usize],
        smoothing: T,
        rows: Option<Vec<usize>>,
    ) -> NodeId {
        let lp = &self.nodes[logp].value;
        let row_ids: Vec<usize> = match &rows {
            Some(r) => r.clone(),
            None => (0..lp.rows()).collect(),
        };
        assert_eq!(targets.len(), row_ids.len());
        let v = T::of_usize(lp.cols());
        let n = T::of_usize(row_ids.len().max(1));
        let uniform = smoothing / v;
        let mut loss = T::zero();
        for (&r, &y) in row_ids.iter().zip(targets.iter()) {
            let row = lp.row(r);
            let mut item = (T::one() - smoothing) * row[y];
            if smoothing > T::zero() {
                item += uniform * row.iter().copied().sum::<T>();
            }
            loss -= item;
        }
        loss /= n;
        let ng = self.needs(logp);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CeLoss {
                logp,
                targets: targets.to_vec(),
                smoothing,
                rows,
            },
            ng,
        )
    }

    /// Backpropagate from a scalar root node.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[root].value.shape(), (1, 1));
        grads[root] = Some(Mat::from_vec(1, 1, vec![T::one()]));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(grad);
                continue;
            }
            self.backprop_node(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(
        grads: &mut [Option<Mat<T>>],
        id: NodeId,
        shape: (usize, usize),
        add: impl FnOnce(&mut Mat<T>),
    ) {
        let slot = &mut grads[id];
        if slot.is_none() {
            *slot = Some(Mat::zeros(shape.0, shape.1));
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: NodeId, grad: &Mat<T>, grads: &mut Vec<Option<Mat<T>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.needs(*a) {
                    let d = grad.matmul(&bv.transpose());
                    Self::accumulate(grads, *a, av.shape(), |g| g.add_assign(&d));
                }
                if self.needs(*b) {
                    let d = av.transpose().matmul(grad);
                    Self::accumulate(grads, *b, bv.shape(), |g| g.add_assign(&d));
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        let shape = self.nodes[p].value.shape();
                        Self::accumulate(grads, p, shape, |g| g.add_assign(grad));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape();
                    Self::accumulate(grads, *a, shape, |g| g.add_assign(grad));
                }
                if self.needs(*b) {
                    let shape = self.nodes[*b].value.shape();
                    let neg = grad.map(|x| -x);
                    Self::accumulate(grads, *b, shape, |g| g.add_assign(&neg));
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.shape();
                    Self::accumulate(grads, *a, shape, |g| g.add_assign(grad));
                }
                if self.needs(*row) {
                    let cols = grad.cols();
                    let mut sum = Mat::zeros(1, cols);
                    for r in 0..grad.rows() {
                        let srow = grad.row(r);
                        let drow = sum.row_mut(0);
                        for c in 0..cols {
                            drow[c] += srow[c];
                        }
                    }
                    Self::accumulate(grads, *row, (1, cols), |g| g.add_assign(&sum));
                }
            }
            Op::MulElem(a, b) => {
                if self.needs(*a) {
                    let bv = &self.nodes[*b].value;
                    let d = elementwise(grad, bv, |g, x| g * x);
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
                if self.needs(*b) {
                    let av = &self.nodes[*a].value;
                    let d = elementwise(grad, av, |g, x| g * x);
                    Self::accumulate(grads, *b, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let d = grad.map(|x| x * *s);
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[*a].value;
                    let d = elementwise(grad, av, |g, x| if x > T::zero() { g } else { T::zero() });
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].value;
                    let d = elementwise(grad, yv, |g, y| g * y * (T::one() - y));
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[*a].value;
                    let d = elementwise(grad, av, |g, x| {
                        let s = sigmoid_scalar(x);
                        g * s * (T::one() + x * (T::one() - s))
                    });
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].value;
                    let mut d = Mat::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let y = yv.row(r);
                        let g = grad.row(r);
                        let dot: T = y.iter().zip(g.iter()).map(|(&yi, &gi)| yi * gi).sum();
                        let drow = d.row_mut(r);
                        for c in 0..y.len() {
                            drow[c] = y[c] * (g[c] - dot);
                        }
                    }
                    Self::accumulate(grads, *a, d.shape(), |gm| gm.add_assign(&d));
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.needs(*a) {
                    let yv = &self.nodes[id].value;
                    let mut d = Mat::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let y = yv.row(r);
                        let g = grad.row(r);
                        let gsum: T = g.iter().copied().sum();
                        let drow = d.row_mut(r);
                        for c in 0..y.len() {
                            drow[c] = g[c] - y[c].exp() * gsum;
                        }
                    }
                    Self::accumulate(grads, *a, d.shape(), |gm| gm.add_assign(&d));
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let n = T::of_usize(xv.cols());
                let cols = xv.cols();
                let mut dx = Mat::zeros(xv.rows(), cols);
                let mut dg = Mat::zeros(1, cols);
                let mut db = Mat::zeros(1, cols);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let mean = row.iter().copied().sum::<T>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + *eps).sqrt();
                    let g = grad.row(r);
                    // xhat and the two row means needed by the ln backward
                    let mut mean_d = T::zero();
                    let mut mean_dx_hat = T::zero();
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let dch = g[c] * gv.at(0, c);
                        mean_d += dch;
                        mean_dx_hat += dch * xhat;
                    }
                    mean_d /= n;
                    mean_dx_hat /= n;
                    let dxrow = dx.row_mut(r);
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv;
                        let dch = g[c] * gv.at(0, c);
                        dxrow[c] = (dch - mean_d - xhat * mean_dx_hat) * inv;
                        dg.row_mut(0)[c] += g[c] * xhat;
                        db.row_mut(0)[c] += g[c];
                    }
                }
                if self.needs(*x) {
                    Self::accumulate(grads, *x, dx.shape(), |g| g.add_assign(&dx));
                }
                if self.needs(*gain) {
                    Self::accumulate(grads, *gain, (1, cols), |g| g.add_assign(&dg));
                }
                if self.needs(*bias) {
                    Self::accumulate(grads, *bias, (1, cols), |g| g.add_assign(&db));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let d = grad.transpose();
                    Self::accumulate(grads, *a, d.shape(), |g| g.add_assign(&d));
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    Self::accumulate(grads, *x, shape, |g| {
                        for r in 0..grad.rows() {
                            let src = grad.row(r);
                            let dst = &mut g.row_mut(r)[*start..*start + *len];
                            for c in 0..*len {
                                dst[c] += src[c];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let shape = self.nodes[p].value.shape();
                        Self::accumulate(grads, p, shape, |g| {
                            for r in 0..grad.rows() {
                                let src = &grad.row(r)[off..off + pc];
                                let dst = g.row_mut(r);
                                for c in 0..pc {
                                    dst[c] += src[c];
                                }
                            }
                        });
                    }
                    off += pc;
                }
            }
            Op::GatherRows { x, ids } => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    Self::accumulate(grads, *x, shape, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            let src = grad.row(r);
                            let dst = g.row_mut(id);
                            for c in 0..src.len() {
                                dst[c] += src[c];
                            }
                        }
                    });
                }
            }
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad,
            } => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    let c = shape.1;
                    Self::accumulate(grads, *x, shape, |g| {
                        for t in 0..grad.rows() {
                            for k in 0..*kernel {
                                let src = t * stride + k;
                                if src < *pad || src - pad >= shape.0 {
                                    continue;
                                }
                                let srow = &grad.row(t)[k * c..(k + 1) * c];
                                let drow = g.row_mut(src - pad);
                                for d in 0..c {
                                    drow[d] += srow[d];
                                }
                            }
                        }
                    });
                }
            }
            Op::DepthwiseConv1d { x, w } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let kernel = wv.rows();
                let pad = (kernel - 1) / 2;
                let t_len = xv.rows();
                let c = xv.cols();
                if self.needs(*x) {
                    let mut dx = Mat::zeros(t_len, c);
                    for t in 0..t_len {
                        let grow = grad.row(t);
                        for k in 0..kernel {
                            let src = t + k;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let wrow = wv.row(k);
                            let drow = dx.row_mut(src - pad);
                            for d in 0..c {
                                drow[d] += wrow[d] * grow[d];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, (t_len, c), |g| g.add_assign(&dx));
                }
                if self.needs(*w) {
                    let mut dw = Mat::zeros(kernel, c);
                    for t in 0..t_len {
                        let grow = grad.row(t);
                        for k in 0..kernel {
                            let src = t + k;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let xrow = xv.row(src - pad);
                            let drow = dw.row_mut(k);
                            for d in 0..c {
                                drow[d] += xrow[d] * grow[d];
                            }
                        }
                    }
                    Self::accumulate(grads, *w, (kernel, c), |g| g.add_assign(&dw));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    let data: Vec<T> = grad
                        .data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&g, &m)| g * m)
                        .collect();
                    let d = Mat::from_vec(shape.0, shape.1, data);
                    Self::accumulate(grads, *x, shape, |g| g.add_assign(&d));
                }
            }
            Op::MaskRowsWith { x, fill, rows } => {
                let masked: std::collections::HashSet<usize> = rows.iter().copied().collect();
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    Self::accumulate(grads, *x, shape, |g| {
                        for r in 0..grad.rows() {
                            if masked.contains(&r) {
                                continue;
                            }
                            let src = grad.row(r);
                            let dst = g.row_mut(r);
                            for c in 0..src.len() {
                                dst[c] += src[c];
                            }
                        }
                    });
                }
                if self.needs(*fill) {
                    let cols = grad.cols();
                    Self::accumulate(grads, *fill, (1, cols), |g| {
                        for &r in rows {
                            let src = grad.row(r);
                            let dst = g.row_mut(0);
                            for c in 0..cols {
                                dst[c] += src[c];
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let shape = self.nodes[*x].value.shape();
                    let g0 = grad.at(0, 0);
                    Self::accumulate(grads, *x, shape, |g| {
                        for v in g.data_mut() {
                            *v += g0;
                        }
                    });
                }
            }
            Op::CtcLoss {
                logp,
                targets,
                blank,
            } => {
                if self.needs(*logp) {
                    let lp = &self.nodes[*logp].value;
                    if let Some(d) = ctc_grad(lp, targets, *blank) {
                        let g0 = grad.at(0, 0);
                        Self::accumulate(grads, *logp, lp.shape(), |g| {
                            for (gv, dv) in g.data_mut().iter_mut().zip(d.data().iter()) {
                                *gv += *dv * g0;
                            }
                        });
                    }
                }
            }
            Op::CeLoss {
                logp,
                targets,
                smoothing,
                rows,
            } => {
                if self.needs(*logp) {
                    let lp = &self.nodes[*logp].value;
                    let row_ids: Vec<usize> = match rows {
                        Some(r) => r.clone(),
                        None => (0..lp.rows()).collect(),
                    };
                    let v = T::of_usize(lp.cols());
                    let n = T::of_usize(row_ids.len().max(1));
                    let g0 = grad.at(0, 0);
                    let uniform = *smoothing / v / n;
                    let main = (T::one() - *smoothing) / n;
                    Self::accumulate(grads, *logp, lp.shape(), |g| {
                        for (&r, &y) in row_ids.iter().zip(targets.iter()) {
                            let dst = g.row_mut(r);
                            if *smoothing > T::zero() {
                                for d in dst.iter_mut() {
                                    *d -= uniform * g0;
                                }
                            }
                            dst[y] -= main * g0;
                        }
                    });
                }
            }
        }
    }
}

fn elementwise<T: Scalar>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(a.shape(), b.shape());
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<T>()
        .ln()
        + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Extended CTC label sequence: blank, y1, blank, y2, ..., blank.
fn ctc_extended(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &y in targets {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

pub fn ctc_min_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

fn ctc_alpha<T: Scalar>(logp: &Mat<T>, ext: &[usize]) -> Mat<T> {
    let t_len = logp.rows();
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let mut alpha = Mat::filled(t_len, s_len, ninf);
    alpha.set(0, 0, logp.at(0, ext[0]));
    if s_len > 1 {
        alpha.set(0, 1, logp.at(0, ext[1]));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha.at(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.at(t - 1, s - 1));
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha.at(t - 1, s - 2));
            }
            if acc != ninf {
                alpha.set(t, s, acc + logp.at(t, ext[s]));
            }
        }
    }
    alpha
}

/// CTC forward score: `-log P(targets | logp)`.
pub fn ctc_forward<T: Scalar>(logp: &Mat<T>, targets: &[usize], blank: usize) -> T {
    if ctc_min_frames(targets) > logp.rows() {
        return T::infinity();
    }
    let ext = ctc_extended(targets, blank);
    let alpha = ctc_alpha(logp, &ext);
    let t_last = logp.rows() - 1;
    let s_len = ext.len();
    let mut total = alpha.at(t_last, s_len - 1);
    if s_len > 1 {
        total = log_add(total, alpha.at(t_last, s_len - 2));
    }
    -total
}

/// Gradient of CTC loss w.r.t. the log-posteriors; `None` if infeasible.
fn ctc_grad<T: Scalar>(logp: &Mat<T>, targets: &[usize], blank: usize) -> Option<Mat<T>> {
    if ctc_min_frames(targets) > logp.rows() {
        return None;
    }
    let ext = ctc_extended(targets, blank);
    let t_len = logp.rows();
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let alpha = ctc_alpha(logp, &ext);

    // beta with emission included at t (mirror of alpha run backwards)
    let mut beta = Mat::filled(t_len, s_len, ninf);
    beta.set(t_len - 1, s_len - 1, logp.at(t_len - 1, ext[s_len - 1]));
    if s_len > 1 {
        beta.set(t_len - 1, s_len - 2, logp.at(t_len - 1, ext[s_len - 2]));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta.at(t + 1, s);
            if s + 1 < s_len {
                acc = log_add(acc, beta.at(t + 1, s + 1));
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                acc = log_add(acc, beta.at(t + 1, s + 2));
            }
            if acc != ninf {
                beta.set(t, s, acc + logp.at(t, ext[s]));
            }
        }
    }

    let mut log_p = alpha.at(t_len - 1, s_len - 1);
    if s_len > 1 {
        log_p = log_add(log_p, alpha.at(t_len - 1, s_len - 2));
    }

    // dL/dlogp[t,k] = -sum_{s: ext[s]=k} exp(alpha + beta - logp[t,k] - logP)
    let mut grad = Mat::zeros(t_len, logp.cols());
    for t in 0..t_len {
        for (s, &lab) in ext.iter().enumerate() {
            let a = alpha.at(t, s);
            let b = beta.at(t, s);
            if a == ninf || b == ninf {
                continue;
            }
            let gamma = (a + b - logp.at(t, lab) - log_p).exp();
            let cur = grad.at(t, lab);
            grad.set(t, lab, cur - gamma);
        }
    }
    Some(grad)
}
