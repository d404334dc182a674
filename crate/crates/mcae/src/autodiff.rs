//! Reverse-mode differentiation over [`Tensor`] expressions.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! node owns its value and remembers the operation and parents that produced
//! it. [`Tape::backward`] then runs one reverse sweep from a scalar node and
//! returns the adjoint of every node, so gradients are available for leaves
//! (parameters) and for intermediates alike (the class-activation maps in the
//! analysis module read an intermediate adjoint directly).
//!
//! The op set is exactly what the encoder/decoder, the losses, and the
//! classifier head need; there is no broadcasting machinery beyond row and
//! column vectors. All math is `f64`; correctness is pinned by the finite
//! difference tests in [`check`].

use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    /// Constant input or parameter; `trainable` marks it for gradient
    /// collection by the optimizer.
    Leaf {
        trainable: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product of two nodes.
    Mul(NodeId, NodeId),
    /// Matrix plus a 1xC row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    /// Matrix plus an Nx1 column vector broadcast over columns.
    AddCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    /// `a @ b^T` without materialising the transpose.
    MatmulNT(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Per-row (mean, reciprocal std) cached by the forward pass.
        stats: Vec<(f64, f64)>,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Gelu(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    RepeatRow {
        x: NodeId,
        n: usize,
    },
    MeanRows(NodeId),
    L2NormalizeRows {
        x: NodeId,
        inv_norms: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Elementwise product with a constant matrix (masks, weight tables).
    MulConst(NodeId, Tensor),
    /// Row sums of `x` weighted elementwise by a constant matrix, Nx1 output.
    RowSumWeighted(NodeId, Tensor),
    /// Scalar sum of all entries of `x` weighted by a constant matrix.
    WeightedSumAll(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Grads {
    adj: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the swept scalar with respect to this node, if the node
    /// participated in the computation.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id.0].as_ref()
    }

    /// Like [`Grads::get`] but materialises a zero tensor for disconnected
    /// nodes.
    pub fn get_or_zero(&self, id: NodeId, tape: &Tape) -> Tensor {
        match self.adj[id.0].as_ref() {
            Some(t) => t.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is collected for it (but one is still
    /// computed if something downstream needs it).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: false })
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { trainable: true })
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row` where `row` is 1xC and `a` is NxC.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, ac), "add_row: row shape");
        let mut v = self.value(a).clone();
        for r in 0..ar {
            let rv = self.value(row).row(0).to_vec();
            for (o, b) in v.row_mut(r).iter_mut().zip(rv.iter()) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// `a + col` where `col` is Nx1 and `a` is NxC.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (ar, _) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (ar, 1), "add_col: column shape");
        let col_v: Vec<f64> = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (r, &cv) in col_v.iter().enumerate() {
            for o in v.row_mut(r) {
                *o += cv;
            }
        }
        self.push(v, Op::AddCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatmulNT(a, b))
    }

    /// Row-wise layer normalisation with learned gain and bias (both 1xC).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xs = self.value(x);
        let (n, c) = xs.shape();
        assert_eq!(self.value(gain).shape(), (1, c), "layer_norm: gain shape");
        assert_eq!(self.value(bias).shape(), (1, c), "layer_norm: bias shape");
        let mut out = Tensor::zeros(n, c);
        let mut stats = Vec::with_capacity(n);
        for r in 0..n {
            let row = xs.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.push((mean, rstd));
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * rstd;
                out.set(
                    r,
                    j,
                    xhat * self.value(gain).get(0, j) + self.value(bias).get(0, j),
                );
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        )
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let (n, c) = xs.shape();
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let row = xs.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out.set(r, j, e / z);
            }
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise log-softmax, stable for large logits.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let (n, c) = xs.shape();
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let row = xs.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (j, &v) in row.iter().enumerate() {
                out.set(r, j, v - lse);
            }
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Elementwise natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Ln(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(x).gather_rows(idx);
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Place row `r` of `x` at row `idx[r]` of an `n_rows`-row output; all
    /// other rows are zero. Indices must be unique.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], n_rows: usize) -> NodeId {
        let xs = self.value(x);
        assert_eq!(xs.rows(), idx.len(), "scatter_rows: index count");
        let mut v = Tensor::zeros(n_rows, xs.cols());
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n_rows, "scatter_rows: index {i} out of {n_rows}");
            v.row_mut(i).copy_from_slice(xs.row(r));
        }
        self.push(
            v,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Tile a 1xC row `n` times.
    pub fn repeat_row(&mut self, x: NodeId, n: usize) -> NodeId {
        let xs = self.value(x);
        assert_eq!(xs.rows(), 1, "repeat_row: input must be a single row");
        let row = xs.row(0).to_vec();
        let mut v = Tensor::zeros(n, xs.cols());
        for r in 0..n {
            v.row_mut(r).copy_from_slice(&row);
        }
        self.push(v, Op::RepeatRow { x, n })
    }

    /// Column-wise mean over rows, 1xC output.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let (n, c) = xs.shape();
        assert!(n > 0, "mean_rows: empty input");
        let mut v = Tensor::zeros(1, c);
        for r in 0..n {
            for (j, &val) in xs.row(r).iter().enumerate() {
                v.set(0, j, v.get(0, j) + val);
            }
        }
        let v = v.scale(1.0 / n as f64);
        self.push(v, Op::MeanRows(x))
    }

    /// Scale every row to unit Euclidean norm. Panics on a row whose norm is
    /// numerically zero; upstream layer norms make that unreachable in the
    /// model, and the losses validate their own inputs.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xs = self.value(x);
        let (n, c) = xs.shape();
        let mut v = Tensor::zeros(n, c);
        let mut inv_norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = xs.row(r);
            let nrm = dot(row, row).sqrt();
            assert!(nrm > 1e-300, "l2_normalize_rows: zero-norm row {r}");
            let inv = 1.0 / nrm;
            inv_norms.push(inv);
            for (j, &val) in row.iter().enumerate() {
                v.set(r, j, val * inv);
            }
        }
        self.push(v, Op::L2NormalizeRows { x, inv_norms })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xs = self.value(x);
        assert!(start < end && end <= xs.cols(), "slice_cols: bad range");
        let v = Tensor::from_fn(xs.rows(), end - start, |r, c| xs.get(r, start + c));
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let ps = self.value(p);
            assert_eq!(ps.rows(), n, "concat_cols: row mismatch");
            for r in 0..n {
                for (j, &val) in ps.row(r).iter().enumerate() {
                    v.set(r, off + j, val);
                }
            }
            off += ps.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Tensor::zeros(total, c);
        let mut off = 0;
        for &p in parts {
            let ps = self.value(p);
            assert_eq!(ps.cols(), c, "concat_rows: column mismatch");
            for r in 0..ps.rows() {
                v.row_mut(off + r).copy_from_slice(ps.row(r));
            }
            off += ps.rows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Elementwise product with a constant weight matrix.
    pub fn mul_const(&mut self, x: NodeId, w: Tensor) -> NodeId {
        let v = self.value(x).zip_map(&w, |a, b| a * b);
        self.push(v, Op::MulConst(x, w))
    }

    /// `out[r] = sum_j x[r][j] * w[r][j]`, Nx1 output.
    pub fn row_sum_weighted(&mut self, x: NodeId, w: Tensor) -> NodeId {
        let xs = self.value(x);
        assert_eq!(xs.shape(), w.shape(), "row_sum_weighted: weight shape");
        let v = Tensor::from_fn(xs.rows(), 1, |r, _| dot(xs.row(r), w.row(r)));
        self.push(v, Op::RowSumWeighted(x, w))
    }

    /// `sum_{r,j} x[r][j] * w[r][j]` as a 1x1 node.
    pub fn weighted_sum_all(&mut self, x: NodeId, w: Tensor) -> NodeId {
        let xs = self.value(x);
        assert_eq!(xs.shape(), w.shape(), "weighted_sum_all: weight shape");
        let s = xs
            .data()
            .iter()
            .zip(w.data().iter())
            .map(|(&a, &b)| a * b)
            .sum();
        let v = Tensor::from_vec(1, 1, vec![s]).expect("1x1");
        self.push(v, Op::WeightedSumAll(x, w))
    }

    /// Mean of a set of 1x1 nodes, as a 1x1 node.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let stacked = self.concat_rows(parts);
        self.mean_rows(stacked)
    }

    /// Reverse sweep from a 1x1 node. Returns the adjoint of every node that
    /// participates in the computation of `from`.
    pub fn backward(&self, from: NodeId) -> Grads {
        assert_eq!(
            self.value(from).shape(),
            (1, 1),
            "backward: sweep must start from a scalar node"
        );
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[from.0] = Some(Tensor::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for i in (0..=from.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.push_to_parents(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Grads { adj }
    }

    fn push_to_parents(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g, self);
                accumulate(adj, *b, g, self);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g, self);
                accumulate_scaled(adj, *b, g, -1.0, self);
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y);
                let db = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(adj, *a, &da, self);
                accumulate(adj, *b, &db, self);
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g, self);
                let mut drow = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (j, &val) in g.row(r).iter().enumerate() {
                        drow.set(0, j, drow.get(0, j) + val);
                    }
                }
                accumulate(adj, *row, &drow, self);
            }
            Op::AddCol(a, col) => {
                accumulate(adj, *a, g, self);
                let dcol = Tensor::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                accumulate(adj, *col, &dcol, self);
            }
            Op::Scale(a, c) => {
                accumulate_scaled(adj, *a, g, *c, self);
            }
            Op::Matmul(a, b) => {
                let da = g.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(g);
                accumulate(adj, *a, &da, self);
                accumulate(adj, *b, &db, self);
            }
            Op::MatmulNT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.matmul_tn(self.value(*a));
                accumulate(adj, *a, &da, self);
                accumulate(adj, *b, &db, self);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let xs = self.value(*x);
                let (n, c) = xs.shape();
                let gv = self.value(*gain);
                let mut dx = Tensor::zeros(n, c);
                let mut dgain = Tensor::zeros(1, c);
                let mut dbias = Tensor::zeros(1, c);
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let grow = g.row(r);
                    let xrow = xs.row(r);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        dgain.set(0, j, dgain.get(0, j) + grow[j] * xhat);
                        dbias.set(0, j, dbias.get(0, j) + grow[j]);
                        let d = grow[j] * gv.get(0, j);
                        dxhat[j] = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * rstd;
                        let v =
                            rstd * (dxhat[j] - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                        dx.set(r, j, v);
                    }
                }
                accumulate(adj, *x, &dx, self);
                accumulate(adj, *gain, &dgain, self);
                accumulate(adj, *bias, &dbias, self);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let s = dot(grow, yrow);
                    for j in 0..c {
                        dx.set(r, j, yrow[j] * (grow[j] - s));
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    let grow = g.row(r);
                    let yrow = y.row(r);
                    let gsum: f64 = grow.iter().sum();
                    for (j, (&gj, &yj)) in grow.iter().zip(yrow).enumerate() {
                        dx.set(r, j, gj - yj.exp() * gsum);
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_deriv(xv));
                accumulate(adj, *x, &dx, self);
            }
            Op::Ln(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                accumulate(adj, *x, &dx, self);
            }
            Op::Exp(x) => {
                let dx = g.zip_map(&node.value, |gv, yv| gv * yv);
                accumulate(adj, *x, &dx, self);
            }
            Op::GatherRows { x, idx } => {
                let xs = self.value(*x);
                let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (j, &val) in g.row(r).iter().enumerate() {
                        dx.set(i, j, dx.get(i, j) + val);
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::ScatterRows { x, idx } => {
                let dx = g.gather_rows(idx);
                accumulate(adj, *x, &dx, self);
            }
            Op::RepeatRow { x, n } => {
                let c = g.cols();
                let mut dx = Tensor::zeros(1, c);
                for r in 0..*n {
                    for (j, &val) in g.row(r).iter().enumerate() {
                        dx.set(0, j, dx.get(0, j) + val);
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::MeanRows(x) => {
                let xs = self.value(*x);
                let (n, c) = xs.shape();
                let inv = 1.0 / n as f64;
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        dx.set(r, j, g.get(0, j) * inv);
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::L2NormalizeRows { x, inv_norms } => {
                let y = &node.value;
                let (n, c) = y.shape();
                let mut dx = Tensor::zeros(n, c);
                for (r, &inv) in inv_norms.iter().enumerate() {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let gy = dot(grow, yrow);
                    for (j, (&gj, &yj)) in grow.iter().zip(yrow).enumerate() {
                        dx.set(r, j, inv * (gj - yj * gy));
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::SliceCols { x, start, end } => {
                let xs = self.value(*x);
                debug_assert_eq!(g.cols(), end - start, "slice adjoint width");
                let mut dx = Tensor::zeros(xs.rows(), xs.cols());
                for r in 0..g.rows() {
                    for (j, &val) in g.row(r).iter().enumerate() {
                        dx.set(r, start + j, val);
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let dp = Tensor::from_fn(g.rows(), pc, |r, c| g.get(r, off + c));
                    accumulate(adj, p, &dp, self);
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    let dp = Tensor::from_fn(pr, g.cols(), |r, c| g.get(off + r, c));
                    accumulate(adj, p, &dp, self);
                    off += pr;
                }
            }
            Op::MulConst(x, w) => {
                let dx = g.zip_map(w, |gv, wv| gv * wv);
                accumulate(adj, *x, &dx, self);
            }
            Op::RowSumWeighted(x, w) => {
                let (n, c) = w.shape();
                let mut dx = Tensor::zeros(n, c);
                for r in 0..n {
                    let gr = g.get(r, 0);
                    for j in 0..c {
                        dx.set(r, j, gr * w.get(r, j));
                    }
                }
                accumulate(adj, *x, &dx, self);
            }
            Op::WeightedSumAll(x, w) => {
                let g0 = g.get(0, 0);
                let dx = w.scale(g0);
                accumulate(adj, *x, &dx, self);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, tape: &Tape) {
    accumulate_scaled(adj, id, delta, 1.0, tape);
}

fn accumulate_scaled(adj: &mut [Option<Tensor>], id: NodeId, delta: &Tensor, c: f64, tape: &Tape) {
    let slot = &mut adj[id.0];
    match slot {
        Some(t) => t.add_assign_scaled(delta, c),
        None => {
            let (r, cols) = tape.value(id).shape();
            debug_assert_eq!(delta.shape(), (r, cols), "adjoint shape mismatch");
            let mut t = Tensor::zeros(r, cols);
            t.add_assign_scaled(delta, c);
            *slot = Some(t);
        }
    }
}

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub mod check {
    //! Finite-difference utilities for validating analytic gradients.
    //!
    //! The numeric side never touches the tape: it re-runs a caller-supplied
    //! forward closure at perturbed inputs, so agreement between the two
    //! routes is meaningful evidence rather than a tautology.

    /// Central-difference gradient of `f` at `x`. The step for coordinate `i`
    /// is `h * max(1, |x[i]|)` to keep relative perturbations uniform.
    pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut buf = x.to_vec();
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let step = h * x[i].abs().max(1.0);
            let orig = buf[i];
            buf[i] = orig + step;
            let fp = f(&buf);
            buf[i] = orig - step;
            let fm = f(&buf);
            buf[i] = orig;
            grad[i] = (fp - fm) / (2.0 * step);
        }
        grad
    }

    /// Relative error between an analytic and a numeric derivative, with an
    /// absolute floor so near-zero pairs compare as equal.
    pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-8 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        }
    }

    /// Largest relative error across two gradient vectors.
    pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }
}
