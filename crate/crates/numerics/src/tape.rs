//! Reverse-mode gradient tape.
//!
//! Operations are appended to the tape as they are evaluated. Node indices
//! are therefore a topological order, and [`Tape::backward`] walks them from
//! the loss down to zero, visiting each recorded operation exactly once.
//!
//! Shape mismatches are programming errors and panic with both shapes in the
//! message.

use std::sync::Arc;

use crate::kernels;
use crate::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed neighbour lists: output row `i` averages input rows
/// `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborLists {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl NeighborLists {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SquaredDistance(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        probs: Var,
        labels: Vec<f64>,
    },
    NeighborMean {
        x: Var,
        lists: Arc<NeighborLists>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g))
    }
}

fn shape_check(op: &str, ok: bool, a: &Tensor, b: &Tensor) {
    if !ok {
        panic!(
            "shape mismatch in {op}: left {:?}, right {:?}",
            a.shape(),
            b.shape()
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// Records a shared tensor without copying it.
    pub fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check(
            "matmul",
            ta.ndim() == 2 && tb.ndim() == 2 && ta.shape()[1] == tb.shape()[0],
            ta,
            tb,
        );
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check(
            "matmul_bt",
            ta.ndim() == 2 && tb.ndim() == 2 && ta.shape()[1] == tb.shape()[1],
            ta,
            tb,
        );
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, ta.data(), false, tb.data(), true, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check(name, ta.shape() == tb.shape(), ta, tb);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with("add", a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with("sub", a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with("mul", a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `b` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check(
            "add_row",
            ta.ndim() == 2 && tb.ndim() == 1 && ta.cols() == tb.numel(),
            ta,
            tb,
        );
        let mut data = ta.data().to_vec();
        let c = tb.numel();
        for row in data.chunks_mut(c) {
            for (v, w) in row.iter_mut().zip(tb.data()) {
                *v += w;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.max(0.0)).collect());
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
        );
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + cols - rows`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.ndim(), 2, "softmax needs a matrix, got {:?}", ta.shape());
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(ta.data(), r, c, causal, &mut out);
        self.push(Tensor::matrix(r, c, out), Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        shape_check(
            "layer_norm",
            tx.ndim() == 2 && tg.numel() == tx.cols() && tb.numel() == tx.cols(),
            tx,
            tg,
        );
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        kernels::layer_norm_rows(tx.data(), c, tg.data(), tb.data(), &mut out, &mut xhat, &mut inv_std);
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Gathers rows of `table` (an embedding lookup).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        assert_eq!(tt.ndim(), 2, "embedding table must be a matrix, got {:?}", tt.shape());
        assert!(!ids.is_empty(), "embedding lookup with no ids");
        let d = tt.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tt.rows(), "embedding id {i} out of range for table {:?}", tt.shape());
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(ids.len(), d, out);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`),
    /// or vectors along their only axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).clone();
        let t = if first.ndim() == 1 {
            assert_eq!(axis, 0, "vectors concatenate along axis 0");
            let mut data = Vec::new();
            for &p in parts {
                let tp = self.value(p);
                shape_check("concat", tp.ndim() == 1, &first, tp);
                data.extend_from_slice(tp.data());
            }
            Tensor::vector(data)
        } else if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let tp = self.value(p);
                shape_check("concat", tp.ndim() == 2 && tp.cols() == first.cols(), &first, tp);
                rows += tp.rows();
                data.extend_from_slice(tp.data());
            }
            Tensor::matrix(rows, first.cols(), data)
        } else {
            assert_eq!(axis, 1, "concat axis must be 0 or 1");
            let rows = first.rows();
            let mut cols = 0;
            for &p in parts {
                let tp = self.value(p);
                shape_check("concat", tp.ndim() == 2 && tp.rows() == rows, &first, tp);
                cols += tp.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(rows, cols, data)
        };
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Contiguous range `start..start + len` along `axis` (rows or columns of
    /// a matrix, elements of a vector).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(len > 0, "empty slice");
        let t = if tx.ndim() == 1 {
            assert_eq!(axis, 0, "vectors slice along axis 0");
            assert!(start + len <= tx.numel(), "slice {start}+{len} out of {:?}", tx.shape());
            Tensor::vector(tx.data()[start..start + len].to_vec())
        } else if axis == 0 {
            assert!(start + len <= tx.rows(), "slice {start}+{len} out of {:?}", tx.shape());
            let c = tx.cols();
            Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec())
        } else {
            assert!(start + len <= tx.cols(), "slice {start}+{len} out of {:?}", tx.shape());
            let mut data = Vec::with_capacity(tx.rows() * len);
            for i in 0..tx.rows() {
                data.extend_from_slice(&tx.row(i)[start..start + len]);
            }
            Tensor::matrix(tx.rows(), len, data)
        };
        self.push(t, Op::Slice { x, axis, start }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums each row of a matrix, giving a vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        self.push(Tensor::vector(data), Op::SumRows(a), &[a])
    }

    /// Row-wise squared Euclidean distance between two matrices.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        shape_check("squared_distance", ta.shape() == tb.shape(), ta, tb);
        let data = (0..ta.rows())
            .map(|i| kernels::squared_distance(ta.row(i), tb.row(i)))
            .collect();
        self.push(Tensor::vector(data), Op::SquaredDistance(a, b), &[a, b])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.ndim(), 2, "cross_entropy logits must be a matrix");
        assert_eq!(tl.rows(), targets.len(), "one target per logits row");
        let (r, c) = (tl.rows(), tl.cols());
        let mut probs = vec![0.0; r * c];
        kernels::softmax_rows(tl.data(), r, c, false, &mut probs);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "target {t} out of range for {c} classes");
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Var {
        let tp = self.value(probs);
        assert_eq!(tp.numel(), labels.len(), "one label per probability");
        let n = labels.len() as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&f, &y)| {
                let f = f.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * f.ln() + (1.0 - y) * (1.0 - f).ln())
            })
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    /// Row `i` of the output is the mean of the rows of `x` listed for `i`
    /// (zero when the list is empty). Summation order is canonical, so the
    /// result is invariant to how rows of `x` are labelled.
    pub fn neighbor_mean(&mut self, x: Var, lists: &Arc<NeighborLists>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.ndim(), 2, "neighbor_mean needs a matrix");
        let d = tx.cols();
        let n_out = lists.len();
        assert!(n_out > 0, "neighbor_mean with no output rows");
        let mut out = vec![0.0; n_out * d];
        for i in 0..n_out {
            let nb = lists.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let dst = &mut out[i * d..(i + 1) * d];
            kernels::canonical_row_sum(tx.data(), d, nb, dst);
            let w = 1.0 / nb.len() as f64;
            dst.iter_mut().for_each(|v| *v *= w);
        }
        self.push(
            Tensor::matrix(n_out, d, out),
            Op::NeighborMean {
                x,
                lists: Arc::clone(lists),
            },
            &[x],
        )
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = Arc::clone(&self.nodes[a.0].value);
        self.leaf(v, false)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).numel(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, 1.0, g, false, tb.data(), true, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, 1.0, ta.data(), true, g, false, 1.0, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, 1.0, g, false, tb.data(), false, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::gemm(n, m, k, 1.0, g, true, ta.data(), false, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    // out is r x c, input is c x r
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, (grow, yrow)) in ga.chunks_mut(c).zip(g.chunks(c).zip(out.data().chunks(c))) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, dy), y) in row.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (dy - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gain_v = self.value(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, gxrow) in gx.chunks_mut(c).enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gain_v.data()[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..c {
                            gxrow[j] += inv / nf * (nf * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(c) {
                        gb.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if out.ndim() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if let Some(gp) = self.acc(grads, p) {
                            gp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(x, y)| *x += y);
                        }
                        offset += len;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if let Some(gp) = self.acc(grads, p) {
                            for (r, row) in gp.chunks_mut(pc).enumerate() {
                                let src = &g[r * total + col..r * total + col + pc];
                                row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                        col += pc;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let tx_cols = self.value(*x).cols();
                let is_vec = self.value(*x).ndim() == 1;
                if let Some(gx) = self.acc(grads, *x) {
                    if is_vec {
                        gx[*start..*start + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += b);
                    } else if *axis == 0 {
                        let off = start * tx_cols;
                        gx[off..off + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += b);
                    } else {
                        let len = out.cols();
                        for (r, grow) in g.chunks(len).enumerate() {
                            let dst = &mut gx[r * tx_cols + start..r * tx_cols + start + len];
                            dst.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let w = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += w);
                }
            }
            Op::SumRows(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let c = ga.len() / g.len();
                    for (row, gr) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gr);
                    }
                }
            }
            Op::SquaredDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let diff: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(idx, (x, y))| 2.0 * (x - y) * g[idx / c])
                    .collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&diff).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let w = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += w * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Bce { probs, labels } => {
                let tp = self.value(*probs);
                let w = g[0] / labels.len() as f64;
                if let Some(gp) = self.acc(grads, *probs) {
                    for ((x, &f), &y) in gp.iter_mut().zip(tp.data()).zip(labels) {
                        if f > BCE_CLAMP && f < 1.0 - BCE_CLAMP {
                            *x += w * (-y / f + (1.0 - y) / (1.0 - f));
                        }
                    }
                }
            }
            Op::NeighborMean { x, lists } => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..lists.len() {
                        let nb = lists.neighbors(i);
                        if nb.is_empty() {
                            continue;
                        }
                        let w = 1.0 / nb.len() as f64;
                        let src = &g[i * d..(i + 1) * d];
                        for &j in nb {
                            for (a, b) in gx[j * d..(j + 1) * d].iter_mut().zip(src) {
                                *a += w * b;
                            }
                        }
                    }
                }
            }
        }
    }
}
