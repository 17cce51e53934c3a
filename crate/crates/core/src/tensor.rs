//! Dense row-major tensors with reverse-mode differentiation.
//!
//! The [`Graph`] is an eager tape: every op computes its forward value at
//! construction and records enough to run the backward pass. Node ids are
//! creation-ordered, so the reverse of the tape is already a topological
//! order. Reductions are fixed left-to-right, which makes gradients
//! deterministic across runs.

use std::cell::RefCell;

use crate::error::{Result, RlmError};
use crate::scalar::{Scalar, PROB_FLOOR};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    AddRowBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    Gelu(TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    GatherRows(TensorId, Vec<usize>),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    BroadcastRow(TensorId),
    SelectElem(TensorId, usize, usize),
    CrossEntropyLogits(TensorId, usize),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    grad: Vec<T>,
    // op-specific cached values (softmax probs, layer-norm xhat/inv_std)
    aux: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Eager autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    clamp_events: RefCell<usize>,
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            clamp_events: RefCell::new(0),
        }
    }

    /// Number of times a probability hit the [`PROB_FLOOR`] clamp.
    pub fn clamp_events(&self) -> usize {
        *self.clamp_events.borrow()
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<T>, aux: Vec<T>, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        let needs_grad = match &op {
            Op::Leaf => false, // set explicitly by `leaf`
            other => self.parents_need_grad(other),
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            grad: vec![T::zero(); data.len()],
            data,
            aux,
            op,
            needs_grad,
        });
        TensorId(nodes.len() - 1)
    }

    fn parents_need_grad(&self, op: &Op) -> bool {
        let nodes = self.nodes.borrow();
        let ng = |id: &TensorId| nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRowBroadcast(a, b) => {
                ng(a) || ng(b)
            }
            Op::LayerNormRows { x, gamma, beta } => ng(x) || ng(gamma) || ng(beta),
            Op::ConcatCols(ids) | Op::ConcatRows(ids) => ids.iter().any(ng),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::BroadcastRow(a)
            | Op::SelectElem(a, _, _)
            | Op::CrossEntropyLogits(a, _) => ng(a),
        }
    }

    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<T>, needs_grad: bool) -> TensorId {
        let id = self.push(rows, cols, data, Vec::new(), Op::Leaf);
        self.nodes.borrow_mut()[id.0].needs_grad = needs_grad;
        id
    }

    pub fn constant(&self, rows: usize, cols: usize, data: Vec<T>) -> TensorId {
        self.leaf(rows, cols, data, false)
    }

    pub fn scalar(&self, v: T) -> TensorId {
        self.constant(1, 1, vec![v])
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id.0].rows, nodes[id.0].cols)
    }

    pub fn data(&self, id: TensorId) -> Vec<T> {
        self.nodes.borrow()[id.0].data.clone()
    }

    pub fn grad(&self, id: TensorId) -> Vec<T> {
        self.nodes.borrow()[id.0].grad.clone()
    }

    /// Value of a 1x1 node.
    pub fn value(&self, id: TensorId) -> T {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[id.0].data.len(), 1);
        nodes[id.0].data[0]
    }

    pub fn matmul(&self, a: TensorId, b: TensorId) -> TensorId {
        let (ar, ac, ad, br, bc, bd) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let nb = &nodes[b.0];
            assert_eq!(na.cols, nb.rows, "matmul inner dims");
            (
                na.rows,
                na.cols,
                na.data.clone(),
                nb.rows,
                nb.cols,
                nb.data.clone(),
            )
        };
        let _ = br;
        let mut out = vec![T::zero(); ar * bc];
        matmul_into(&ad, ar, ac, &bd, bc, &mut out);
        self.push(ar, bc, out, Vec::new(), Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: TensorId) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(c, r, out, Vec::new(), Op::Transpose(a))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c, da) = self.dims_data(a);
        let (rb, cb, db) = self.dims_data(b);
        assert_eq!((r, c), (rb, cb), "add shapes");
        let out: Vec<T> = da.iter().zip(&db).map(|(&x, &y)| x + y).collect();
        self.push(r, c, out, Vec::new(), Op::Add(a, b))
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c, da) = self.dims_data(a);
        let (rb, cb, db) = self.dims_data(b);
        assert_eq!((r, c), (rb, cb), "sub shapes");
        let out: Vec<T> = da.iter().zip(&db).map(|(&x, &y)| x - y).collect();
        self.push(r, c, out, Vec::new(), Op::Sub(a, b))
    }

    /// `a` is `r x c`, `b` is `1 x c`; adds `b` to every row of `a`.
    pub fn add_row_broadcast(&self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c, da) = self.dims_data(a);
        let (rb, cb, db) = self.dims_data(b);
        assert_eq!((rb, cb), (1, c), "row broadcast shapes");
        let mut out = da;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = out[i * c + j] + db[j];
            }
        }
        self.push(r, c, out, Vec::new(), Op::AddRowBroadcast(a, b))
    }

    pub fn scale(&self, a: TensorId, k: f64) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        let kk = T::from_f64(k);
        let out: Vec<T> = d.iter().map(|&x| x * kk).collect();
        self.push(r, c, out, Vec::new(), Op::Scale(a, k))
    }

    pub fn gelu(&self, a: TensorId) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        let out: Vec<T> = d.iter().map(|&x| T::from_f64(gelu(x.to_f64()))).collect();
        self.push(r, c, out, Vec::new(), Op::Gelu(a))
    }

    pub fn softmax_rows(&self, a: TensorId) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_into(&d[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let aux = out.clone();
        self.push(r, c, out, aux, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: TensorId) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        let mut out = vec![T::zero(); r * c];
        let mut probs = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..c {
                out[i * c + j] = row[j] - lz;
            }
        }
        self.push(r, c, out, probs, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let (r, c, d) = self.dims_data(x);
        let (_, cg, g) = self.dims_data(gamma);
        let (_, cb, b) = self.dims_data(beta);
        assert_eq!(cg, c, "layer norm gamma");
        assert_eq!(cb, c, "layer norm beta");
        let mut out = vec![T::zero(); r * c];
        // aux layout: r*c entries of xhat followed by r entries of inv_std
        let mut aux = vec![T::zero(); r * c + r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().cloned().sum::<T>() / T::from_f64(c as f64);
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / T::from_f64(c as f64);
            let inv_std = (var + T::from_f64(eps)).sqrt().recip();
            aux[r * c + i] = inv_std;
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                aux[i * c + j] = xhat;
                out[i * c + j] = g[j] * xhat + b[j];
            }
        }
        self.push(r, c, out, aux, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn gather_rows(&self, table: TensorId, rows: &[usize]) -> TensorId {
        let (tr, c, d) = self.dims_data(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < tr, "gather row {r} out of {tr}");
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        self.push(rows.len(), c, out, Vec::new(), Op::GatherRows(table, rows.to_vec()))
    }

    pub fn slice_rows(&self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        assert!(start + len <= r, "slice rows");
        let out = d[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Vec::new(), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        assert!(start + len <= c, "slice cols");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Vec::new(), Op::SliceCols(a, start))
    }

    pub fn concat_cols(&self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty());
        let r = self.shape(ids[0]).0;
        let total: usize = ids.iter().map(|&id| self.shape(id).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &id in ids {
                let (ri, ci) = self.shape(id);
                assert_eq!(ri, r, "concat cols rows");
                let nodes = self.nodes.borrow();
                out.extend_from_slice(&nodes[id.0].data[i * ci..(i + 1) * ci]);
            }
        }
        self.push(r, total, out, Vec::new(), Op::ConcatCols(ids.to_vec()))
    }

    pub fn concat_rows(&self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty());
        let c = self.shape(ids[0]).1;
        let total: usize = ids.iter().map(|&id| self.shape(id).0).sum();
        let mut out = Vec::with_capacity(total * c);
        for &id in ids {
            let (_, ci) = self.shape(id);
            assert_eq!(ci, c, "concat rows cols");
            out.extend_from_slice(&self.nodes.borrow()[id.0].data);
        }
        self.push(total, c, out, Vec::new(), Op::ConcatRows(ids.to_vec()))
    }

    /// Repeat a `1 x c` row `r` times.
    pub fn broadcast_row(&self, a: TensorId, r: usize) -> TensorId {
        let (ra, c, d) = self.dims_data(a);
        assert_eq!(ra, 1, "broadcast row input");
        let mut out = Vec::with_capacity(r * c);
        for _ in 0..r {
            out.extend_from_slice(&d);
        }
        self.push(r, c, out, Vec::new(), Op::BroadcastRow(a))
    }

    pub fn select(&self, a: TensorId, row: usize, col: usize) -> TensorId {
        let (r, c, d) = self.dims_data(a);
        assert!(row < r && col < c, "select in range");
        self.push(1, 1, vec![d[row * c + col]], Vec::new(), Op::SelectElem(a, row, col))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    ///
    /// `logits` must be `1 x V`. The probability is clamped at
    /// [`PROB_FLOOR`] before the log; clamp events are counted on the
    /// graph. The gradient w.r.t. the logits is `softmax - onehot`.
    pub fn cross_entropy_logits(&self, logits: TensorId, target: usize) -> TensorId {
        let (r, c, d) = self.dims_data(logits);
        assert_eq!(r, 1, "cross entropy expects a single row of logits");
        assert!(target < c, "target within vocab");
        let mut probs = vec![T::zero(); c];
        softmax_into(&d, &mut probs);
        let p = probs[target].to_f64();
        let clamped = p < PROB_FLOOR;
        if clamped {
            *self.clamp_events.borrow_mut() += 1;
        }
        let loss = -(p.max(PROB_FLOOR)).ln();
        self.push(
            1,
            1,
            vec![T::from_f64(loss)],
            probs,
            Op::CrossEntropyLogits(logits, target),
        )
    }

    /// Left-to-right sum of 1x1 nodes.
    pub fn sum_scalars(&self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }

    pub fn mean_scalars(&self, ids: &[TensorId]) -> TensorId {
        let s = self.sum_scalars(ids);
        self.scale(s, 1.0 / ids.len() as f64)
    }

    fn dims_data(&self, id: TensorId) -> (usize, usize, Vec<T>) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        (n.rows, n.cols, n.data.clone())
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively into every node that `needs_grad`.
    pub fn backward(&self, loss: TensorId) {
        let nodes = &mut *self.nodes.borrow_mut();
        assert_eq!(nodes[loss.0].data.len(), 1, "backward from a scalar");
        nodes[loss.0].grad[0] = T::one();
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let (parents, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            backward_op(node, parents);
        }
    }
}

fn backward_op<T: Scalar>(node: &Node<T>, parents: &mut [Node<T>]) {
    let g = &node.grad;
    let (r, c) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ar, ac) = (parents[a.0].rows, parents[a.0].cols);
            let bc = parents[b.0].cols;
            // dA += dC * B^T
            if parents[a.0].needs_grad {
                let bd = parents[b.0].data.clone();
                let da = &mut parents[a.0].grad;
                for i in 0..ar {
                    for k in 0..ac {
                        let mut acc = T::zero();
                        for j in 0..bc {
                            acc = acc + g[i * bc + j] * bd[k * bc + j];
                        }
                        da[i * ac + k] = da[i * ac + k] + acc;
                    }
                }
            }
            // dB += A^T * dC
            if parents[b.0].needs_grad {
                let ad = parents[a.0].data.clone();
                let db = &mut parents[b.0].grad;
                for k in 0..ac {
                    for j in 0..bc {
                        let mut acc = T::zero();
                        for i in 0..ar {
                            acc = acc + ad[i * ac + k] * g[i * bc + j];
                        }
                        db[k * bc + j] = db[k * bc + j] + acc;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if parents[a.0].needs_grad {
                let da = &mut parents[a.0].grad;
                // node is c x r of the parent
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = da[j * r + i] + g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [a, b] {
                if parents[id.0].needs_grad {
                    let d = &mut parents[id.0].grad;
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv = *dv + gv;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if parents[a.0].needs_grad {
                let d = &mut parents[a.0].grad;
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv;
                }
            }
            if parents[b.0].needs_grad {
                let d = &mut parents[b.0].grad;
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv - gv;
                }
            }
        }
        Op::AddRowBroadcast(a, b) => {
            if parents[a.0].needs_grad {
                let d = &mut parents[a.0].grad;
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv;
                }
            }
            if parents[b.0].needs_grad {
                let d = &mut parents[b.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[j] = d[j] + g[i * c + j];
                    }
                }
            }
        }
        Op::Scale(a, k) => {
            if parents[a.0].needs_grad {
                let kk = T::from_f64(*k);
                let d = &mut parents[a.0].grad;
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv = *dv + gv * kk;
                }
            }
        }
        Op::Gelu(a) => {
            if parents[a.0].needs_grad {
                let xd = parents[a.0].data.clone();
                let d = &mut parents[a.0].grad;
                for idx in 0..d.len() {
                    let x = xd[idx].to_f64();
                    d[idx] = d[idx] + g[idx] * T::from_f64(gelu_grad(x));
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if parents[a.0].needs_grad {
                let p = &node.aux;
                let d = &mut parents[a.0].grad;
                for i in 0..r {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g[i * c + j] * p[i * c + j];
                    }
                    for j in 0..c {
                        let idx = i * c + j;
                        d[idx] = d[idx] + p[idx] * (g[idx] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            if parents[a.0].needs_grad {
                let p = &node.aux;
                let d = &mut parents[a.0].grad;
                for i in 0..r {
                    let mut sum = T::zero();
                    for j in 0..c {
                        sum = sum + g[i * c + j];
                    }
                    for j in 0..c {
                        let idx = i * c + j;
                        d[idx] = d[idx] + g[idx] - p[idx] * sum;
                    }
                }
            }
        }
        Op::LayerNormRows { x, gamma, beta } => {
            let xhat = &node.aux[..r * c];
            let inv_std = &node.aux[r * c..];
            let gd = parents[gamma.0].data.clone();
            if parents[gamma.0].needs_grad {
                let d = &mut parents[gamma.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[j] = d[j] + g[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if parents[beta.0].needs_grad {
                let d = &mut parents[beta.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[j] = d[j] + g[i * c + j];
                    }
                }
            }
            if parents[x.0].needs_grad {
                let d = &mut parents[x.0].grad;
                let cn = T::from_f64(c as f64);
                for i in 0..r {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let dxh = g[i * c + j] * gd[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat[i * c + j];
                    }
                    mean_dxhat = mean_dxhat / cn;
                    mean_dxhat_xhat = mean_dxhat_xhat / cn;
                    for j in 0..c {
                        let idx = i * c + j;
                        let dxh = g[idx] * gd[j];
                        d[idx] = d[idx]
                            + inv_std[i] * (dxh - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::GatherRows(a, rows) => {
            if parents[a.0].needs_grad {
                let d = &mut parents[a.0].grad;
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] = d[row * c + j] + g[i * c + j];
                    }
                }
            }
        }
        Op::SliceRows(a, start) => {
            if parents[a.0].needs_grad {
                let d = &mut parents[a.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[(start + i) * c + j] = d[(start + i) * c + j] + g[i * c + j];
                    }
                }
            }
        }
        Op::SliceCols(a, start) => {
            if parents[a.0].needs_grad {
                let pc = parents[a.0].cols;
                let d = &mut parents[a.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[i * pc + start + j] = d[i * pc + start + j] + g[i * c + j];
                    }
                }
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for id in ids {
                let ci = parents[id.0].cols;
                if parents[id.0].needs_grad {
                    let d = &mut parents[id.0].grad;
                    for i in 0..r {
                        for j in 0..ci {
                            d[i * ci + j] = d[i * ci + j] + g[i * c + offset + j];
                        }
                    }
                }
                offset += ci;
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for id in ids {
                let ri = parents[id.0].rows;
                if parents[id.0].needs_grad {
                    let d = &mut parents[id.0].grad;
                    for (dv, &gv) in d.iter_mut().zip(&g[offset * c..(offset + ri) * c]) {
                        *dv = *dv + gv;
                    }
                }
                offset += ri;
            }
        }
        Op::BroadcastRow(a) => {
            if parents[a.0].needs_grad {
                let d = &mut parents[a.0].grad;
                for i in 0..r {
                    for j in 0..c {
                        d[j] = d[j] + g[i * c + j];
                    }
                }
            }
        }
        Op::SelectElem(a, row, col) => {
            if parents[a.0].needs_grad {
                let pc = parents[a.0].cols;
                parents[a.0].grad[row * pc + col] = parents[a.0].grad[row * pc + col] + g[0];
            }
        }
        Op::CrossEntropyLogits(a, target) => {
            if parents[a.0].needs_grad {
                let p = &node.aux;
                let d = &mut parents[a.0].grad;
                for j in 0..d.len() {
                    let onehot = if j == *target { T::one() } else { T::zero() };
                    d[j] = d[j] + g[0] * (p[j] - onehot);
                }
            }
        }
    }
}

fn matmul_into<T: Scalar>(a: &[T], ar: usize, ac: usize, b: &[T], bc: usize, out: &mut [T]) {
    for i in 0..ar {
        for k in 0..ac {
            let av = a[i * ac + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b[k * bc..(k + 1) * bc];
            let orow = &mut out[i * bc..(i + 1) * bc];
            for j in 0..bc {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let mx = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        z = z + *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ---------------------------------------------------------------------------
// Standalone forward kernels with the module's numeric contracts.
// ---------------------------------------------------------------------------

/// Numerically stable softmax over a logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(RlmError::NonFinite("logits".into()));
    }
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// `-log dist[target]`, clamped at the probability floor.
///
/// Returns the loss and whether the clamp fired.
pub fn cross_entropy<T: Scalar>(dist: &[T], target: usize) -> (T, bool) {
    let p = dist[target].to_f64();
    let clamped = p < PROB_FLOOR;
    (T::from_f64(-(p.max(PROB_FLOOR)).ln()), clamped)
}

/// `gamma * (x - mean)/sqrt(var + eps) + beta` over one vector.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: f64) -> Vec<T> {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().cloned().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = (var + T::from_f64(eps)).sqrt().recip();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv_std + b)
        .collect()
}

/// Bidirectional scaled dot-product attention, `L x d` inputs, no mask.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], len: usize, dim: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(RlmError::EmptySequence("attention input".into()));
    }
    let scale = T::from_f64(1.0 / (dim as f64).sqrt());
    let mut out = vec![T::zero(); len * dim];
    let mut scores = vec![T::zero(); len];
    let mut probs = vec![T::zero(); len];
    for i in 0..len {
        for j in 0..len {
            let mut dot = T::zero();
            for t in 0..dim {
                dot = dot + q[i * dim + t] * k[j * dim + t];
            }
            scores[j] = dot * scale;
        }
        softmax_into(&scores, &mut probs);
        for j in 0..len {
            for t in 0..dim {
                out[i * dim + t] = out[i * dim + t] + probs[j] * v[j * dim + t];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameter storage and finite-difference gradient verification.
// ---------------------------------------------------------------------------

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Ordered collection of parameters; iteration order is fixed at
/// construction and shared by the optimizer, checkpoints, and gradient
/// checks.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) {
        assert_eq!(rows * cols, data.len(), "param {name} shape");
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        &self.params[self.index_of(name)]
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Register every parameter as a graph leaf, in set order.
    pub fn leaves(&self, g: &Graph<T>, needs_grad: bool) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.rows, p.cols, p.data.clone(), needs_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Analytic gradients parallel to a [`ParamSet`].
pub type ParamGrads<T> = Vec<Vec<T>>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central-difference check of `analytic` against `eval`.
///
/// `eval` must be a pure function of the parameter values. Relative error
/// is `|a - n| / max(|a|, |n|, 1e-8)`, maximized over every parameter
/// element.
pub fn grad_check<F>(
    params: &mut ParamSet<f64>,
    mut eval: F,
    analytic: &ParamGrads<f64>,
    h: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let mut max_rel_err: f64 = 0.0;
    let mut worst_param = String::new();
    let mut checked = 0;
    for pi in 0..params.params.len() {
        for vi in 0..params.params[pi].data.len() {
            let a = analytic[pi][vi];
            let mut rel_at = |step: f64| {
                let orig = params.params[pi].data[vi];
                params.params[pi].data[vi] = orig + step;
                let up = eval(params);
                params.params[pi].data[vi] = orig - step;
                let down = eval(params);
                params.params[pi].data[vi] = orig;
                let numeric = (up - down) / (2.0 * step);
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
            };
            // No single step suits every element: tiny gradients drown in
            // cancellation at small h, high-curvature directions truncate
            // at large h. A wrong analytic gradient disagrees at *every*
            // step, so taking the best of a few neighboring steps only
            // filters finite-difference artifacts.
            let mut rel = rel_at(h);
            for mul in [10.0, 100.0, 0.1] {
                if rel <= 1e-6 {
                    break;
                }
                rel = rel.min(rel_at(h * mul));
            }
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{}[{}]", params.params[pi].name, vi);
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_param,
        checked,
    }
}
