//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! A [`Graph`] owns every intermediate tensor. Building an op records the
//! inputs' node ids and the computed value; [`Graph::gradients_of`] walks
//! the tape backwards once and accumulates adjoints. Node ids only grow,
//! so tape order is already topological order.
//!
//! Op constructors assert shape agreement and panic on violation: a bad
//! shape inside a recorded computation is a programming error, not a
//! recoverable condition. The fallible surface is config validation,
//! which happens before any tape is built.

use crate::ops;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("gradients require a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
}

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful for
/// the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    /// x (R x C) + v (1 x C), broadcast over rows.
    AddRowVec(Var, Var),
    /// x (R x C) * v (1 x C), broadcast over rows.
    MulRowVec(Var, Var),
    /// x (R x C) with row k scaled by s\[k\] (R x 1).
    ScaleRows(Var, Var),
    Gelu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row-wise log-sum-exp, (R x C) -> (R x 1).
    LogSumExpRows(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Column means, (R x C) -> (1 x C).
    MeanRows(Var),
    /// Row-wise RMS normalization with optional gain (1 x C).
    RmsNormRows { x: Var, gain: Option<Var> },
    /// Row gather; `None` produces a zero row. (R x C) -> (K x C).
    GatherRows { x: Var, index: Vec<Option<usize>> },
    /// out\[index\[k\]\] += src\[k\]; indices may repeat. (K x C) -> (R x C).
    ScatterAddRows { src: Var, index: Vec<usize> },
    /// Element picks (row, col) -> (K x 1).
    GatherElems { x: Var, index: Vec<(usize, usize)> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation as it runs; replays it backwards for gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Introduces a leaf. Whether it is a trainable parameter or a fixed
    /// constant is decided later by which vars are passed to
    /// [`Graph::gradients_of`].
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .val(a)
            .zip_map(self.val(b), |x, y| x + y)
            .expect("add: shape mismatch");
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .val(a)
            .zip_map(self.val(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .val(a)
            .zip_map(self.val(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .val(a)
            .zip_map(self.val(b), |x, y| x / y)
            .expect("div: shape mismatch");
        self.push(value, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = ops::matmul(self.val(a), self.val(b)).expect("matmul: bad shapes");
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = ops::transpose(self.val(a)).expect("transpose: not a matrix");
        self.push(value, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.val(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let value = broadcast_rows(self.val(x), self.val(v), |a, b| a + b);
        self.push(value, Op::AddRowVec(x, v))
    }

    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Var {
        let value = broadcast_rows(self.val(x), self.val(v), |a, b| a * b);
        self.push(value, Op::MulRowVec(x, v))
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = self.val(x).require_matrix().expect("scale_rows: x not a matrix");
        let sv = self.val(s);
        assert_eq!(sv.numel(), r, "scale_rows: scale length {} != rows {r}", sv.numel());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let si = sv.data()[i];
            for j in 0..c {
                out.set2(i, j, self.val(x).get2(i, j) * si);
            }
        }
        self.push(out, Op::ScaleRows(x, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.val(a).map(ops::gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.val(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.val(a)).expect("softmax_rows: bad input");
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let (r, c) = x.require_matrix().expect("log_softmax_rows: not a matrix");
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = x.row(i).unwrap();
            let lse = ops::log_sum_exp(row).expect("log_softmax_rows: bad row");
            for j in 0..c {
                out.set2(i, j, row[j] - lse);
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let (r, _c) = x.require_matrix().expect("log_sum_exp_rows: not a matrix");
        let mut out = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let lse = ops::log_sum_exp(x.row(i).unwrap()).expect("log_sum_exp_rows: bad row");
            out.set2(i, 0, lse);
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).numel();
        let s: f64 = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let (r, c) = x.require_matrix().expect("mean_rows: not a matrix");
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += x.get2(i, j);
            }
            out.set2(0, j, s / r as f64);
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Row-wise RMS normalization. `gain` is a (1 x C) vector applied
    /// elementwise after normalizing; `None` means no learned scale.
    pub fn rms_norm_rows(&mut self, x: Var, gain: Option<Var>) -> Var {
        let xv = self.val(x);
        let (r, c) = xv.require_matrix().expect("rms_norm_rows: not a matrix");
        let gv: Vec<f64> = match gain {
            Some(g) => {
                assert_eq!(self.val(g).numel(), c, "rms_norm_rows: gain length");
                self.val(g).data().to_vec()
            }
            None => Vec::new(),
        };
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xv.row(i).unwrap();
            let y = ops::rms_norm(row, &gv, gain.is_some()).expect("rms_norm_rows: bad row");
            for j in 0..c {
                out.set2(i, j, y[j]);
            }
        }
        self.push(out, Op::RmsNormRows { x, gain })
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Var {
        let xv = self.val(x);
        let (r, c) = xv.require_matrix().expect("gather_rows: not a matrix");
        let mut out = Tensor::zeros(&[index.len(), c]);
        for (k, idx) in index.iter().enumerate() {
            if let Some(i) = idx {
                assert!(*i < r, "gather_rows: row {i} out of {r}");
                for j in 0..c {
                    out.set2(k, j, xv.get2(*i, j));
                }
            }
        }
        self.push(out, Op::GatherRows { x, index })
    }

    pub fn scatter_add_rows(&mut self, src: Var, index: Vec<usize>, out_rows: usize) -> Var {
        let sv = self.val(src);
        let (k, c) = sv.require_matrix().expect("scatter_add_rows: not a matrix");
        assert_eq!(index.len(), k, "scatter_add_rows: index length");
        let mut out = Tensor::zeros(&[out_rows, c]);
        for (row, &target) in index.iter().enumerate() {
            assert!(target < out_rows, "scatter_add_rows: row {target} out of {out_rows}");
            for j in 0..c {
                let v = out.get2(target, j) + sv.get2(row, j);
                out.set2(target, j, v);
            }
        }
        self.push(out, Op::ScatterAddRows { src, index })
    }

    pub fn gather_elems(&mut self, x: Var, index: Vec<(usize, usize)>) -> Var {
        let xv = self.val(x);
        let (r, c) = xv.require_matrix().expect("gather_elems: not a matrix");
        let mut out = Tensor::zeros(&[index.len(), 1]);
        for (k, &(i, j)) in index.iter().enumerate() {
            assert!(i < r && j < c, "gather_elems: ({i},{j}) out of ({r},{c})");
            out.set2(k, 0, xv.get2(i, j));
        }
        self.push(out, Op::GatherElems { x, index })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.val(x);
        let (r, c) = xv.require_matrix().expect("slice_cols: not a matrix");
        assert!(start + len <= c, "slice_cols: {start}+{len} out of {c}");
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            for j in 0..len {
                out.set2(i, j, xv.get2(i, start + j));
            }
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let r = self.val(parts[0]).require_matrix().expect("concat_cols").0;
        let total: usize = parts
            .iter()
            .map(|p| {
                let (pr, pc) = self.val(*p).require_matrix().expect("concat_cols");
                assert_eq!(pr, r, "concat_cols: row mismatch");
                pc
            })
            .sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for p in parts {
            let pv = self.val(*p);
            let pc = pv.cols().unwrap();
            for i in 0..r {
                for j in 0..pc {
                    out.set2(i, off + j, pv.get2(i, j));
                }
            }
            off += pc;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Accumulates d(output)/d(param) for each requested var by a single
    /// reverse sweep. `output` must be scalar. Params the output does not
    /// depend on get zero gradients of their own shape.
    pub fn gradients_of(&self, output: Var, params: &[Var]) -> Result<Vec<Tensor>, GraphError> {
        let out_val = self.val(output);
        if !out_val.is_scalar() {
            return Err(GraphError::NonScalarOutput {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::scalar(1.0));

        for id in (0..=output.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            adj[id] = Some(g.clone());
            self.backward_one(id, &g, &mut adj);
        }

        Ok(params
            .iter()
            .map(|p| match &adj[p.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.val(*p).shape()),
            })
            .collect())
    }

    fn backward_one(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, a.0, g.clone());
                accumulate(adj, b.0, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, a.0, g.clone());
                accumulate(adj, b.0, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), |gi, bi| gi * bi).unwrap();
                let gb = g.zip_map(self.val(*a), |gi, ai| gi * ai).unwrap();
                accumulate(adj, a.0, ga);
                accumulate(adj, b.0, gb);
            }
            Op::Div(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let ga = g.zip_map(bv, |gi, bi| gi / bi).unwrap();
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..bv.numel() {
                    let bi = bv.data()[i];
                    gb.data_mut()[i] = -g.data()[i] * av.data()[i] / (bi * bi);
                }
                accumulate(adj, a.0, ga);
                accumulate(adj, b.0, gb);
            }
            Op::MatMul(a, b) => {
                let bt = ops::transpose(self.val(*b)).unwrap();
                let at = ops::transpose(self.val(*a)).unwrap();
                accumulate(adj, a.0, ops::matmul(g, &bt).unwrap());
                accumulate(adj, b.0, ops::matmul(&at, g).unwrap());
            }
            Op::Transpose(a) => {
                accumulate(adj, a.0, ops::transpose(g).unwrap());
            }
            Op::Scale(a, c) => {
                accumulate(adj, a.0, g.map(|x| x * c));
            }
            Op::AddRowVec(x, v) => {
                accumulate(adj, x.0, g.clone());
                accumulate(adj, v.0, sum_over_rows(g, self.val(*v).shape()));
            }
            Op::MulRowVec(x, v) => {
                let vv = self.val(*v);
                let gx = broadcast_rows(g, vv, |gi, vi| gi * vi);
                let prod = g.zip_map(self.val(*x), |gi, xi| gi * xi).unwrap();
                accumulate(adj, x.0, gx);
                accumulate(adj, v.0, sum_over_rows(&prod, vv.shape()));
            }
            Op::ScaleRows(x, s) => {
                let xv = self.val(*x);
                let sv = self.val(*s);
                let (r, c) = xv.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                let mut gs = Tensor::zeros(sv.shape());
                for i in 0..r {
                    let si = sv.data()[i];
                    let mut dot = 0.0;
                    for j in 0..c {
                        gx.set2(i, j, g.get2(i, j) * si);
                        dot += g.get2(i, j) * xv.get2(i, j);
                    }
                    gs.data_mut()[i] = dot;
                }
                accumulate(adj, x.0, gx);
                accumulate(adj, s.0, gs);
            }
            Op::Gelu(a) => {
                let gx = g.zip_map(&self.val(*a).map(ops::gelu_grad), |gi, di| gi * di).unwrap();
                accumulate(adj, a.0, gx);
            }
            Op::Relu(a) => {
                let gx = g
                    .zip_map(self.val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .unwrap();
                accumulate(adj, a.0, gx);
            }
            Op::SoftmaxRows(a) => {
                // dx = p * (g - <g, p>) per row.
                let p = &node.value;
                let (r, c) = p.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.get2(i, j) * p.get2(i, j);
                    }
                    for j in 0..c {
                        gx.set2(i, j, p.get2(i, j) * (g.get2(i, j) - dot));
                    }
                }
                accumulate(adj, a.0, gx);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax(x) * sum(g) per row; softmax = exp(value).
                let y = &node.value;
                let (r, c) = y.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gsum: f64 = (0..c).map(|j| g.get2(i, j)).sum();
                    for j in 0..c {
                        gx.set2(i, j, g.get2(i, j) - y.get2(i, j).exp() * gsum);
                    }
                }
                accumulate(adj, a.0, gx);
            }
            Op::LogSumExpRows(a) => {
                let xv = self.val(*a);
                let (r, c) = xv.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let p = ops::softmax(xv.row(i).unwrap()).unwrap();
                    for j in 0..c {
                        gx.set2(i, j, g.get2(i, 0) * p[j]);
                    }
                }
                accumulate(adj, a.0, gx);
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                accumulate(adj, a.0, Tensor::full(self.val(*a).shape(), s));
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).numel() as f64;
                let s = g.data()[0] / n;
                accumulate(adj, a.0, Tensor::full(self.val(*a).shape(), s));
            }
            Op::MeanRows(a) => {
                let xv = self.val(*a);
                let (r, c) = xv.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        gx.set2(i, j, g.get2(0, j) / r as f64);
                    }
                }
                accumulate(adj, a.0, gx);
            }
            Op::RmsNormRows { x, gain } => {
                let xv = self.val(*x);
                let (r, c) = xv.require_matrix().unwrap();
                let gv: Vec<f64> = match gain {
                    Some(gn) => self.val(*gn).data().to_vec(),
                    None => vec![1.0; c],
                };
                let mut gx = Tensor::zeros(&[r, c]);
                let mut ggain = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    let row = xv.row(i).unwrap();
                    let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let rms = mean_sq.sqrt();
                    let clamped = rms < ops::RMS_EPS;
                    let rr = rms.max(ops::RMS_EPS);
                    // s = sum_k g_k * gain_k * x_k, the projection term.
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g.get2(i, j) * gv[j] * row[j];
                    }
                    for j in 0..c {
                        let direct = g.get2(i, j) * gv[j] / rr;
                        let through_rms = if clamped {
                            0.0
                        } else {
                            row[j] * s / (c as f64 * rr * rr * rr)
                        };
                        gx.set2(i, j, direct - through_rms);
                        if gain.is_some() {
                            let v = ggain.get2(0, j) + g.get2(i, j) * row[j] / rr;
                            ggain.set2(0, j, v);
                        }
                    }
                }
                accumulate(adj, x.0, gx);
                if let Some(gn) = gain {
                    if self.val(*gn).shape() != ggain.shape() {
                        // Gain may be stored flat; reshape to match.
                        ggain = Tensor::new(self.val(*gn).shape(), ggain.data().to_vec()).unwrap();
                    }
                    accumulate(adj, gn.0, ggain);
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.val(*x);
                let (r, c) = xv.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for (k, idx) in index.iter().enumerate() {
                    if let Some(i) = idx {
                        for j in 0..c {
                            let v = gx.get2(*i, j) + g.get2(k, j);
                            gx.set2(*i, j, v);
                        }
                    }
                }
                accumulate(adj, x.0, gx);
            }
            Op::ScatterAddRows { src, index } => {
                let sv = self.val(*src);
                let (k, c) = sv.require_matrix().unwrap();
                let mut gs = Tensor::zeros(&[k, c]);
                for (row, &target) in index.iter().enumerate() {
                    for j in 0..c {
                        gs.set2(row, j, g.get2(target, j));
                    }
                }
                accumulate(adj, src.0, gs);
            }
            Op::GatherElems { x, index } => {
                let xv = self.val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let c = xv.cols().unwrap();
                for (k, &(i, j)) in index.iter().enumerate() {
                    gx.data_mut()[i * c + j] += g.get2(k, 0);
                }
                accumulate(adj, x.0, gx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.val(*x);
                let (r, c) = xv.require_matrix().unwrap();
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..*len {
                        gx.set2(i, start + j, g.get2(i, j));
                    }
                }
                accumulate(adj, x.0, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let (r, pc) = pv.require_matrix().unwrap();
                    let mut gp = Tensor::zeros(&[r, pc]);
                    for i in 0..r {
                        for j in 0..pc {
                            gp.set2(i, j, g.get2(i, off + j));
                        }
                    }
                    accumulate(adj, p.0, gp);
                    off += pc;
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut adj[id] {
        Some(existing) => {
            let summed = existing.zip_map(&g, |a, b| a + b).expect("adjoint shape");
            *existing = summed;
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_rows(x: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = x.require_matrix().expect("broadcast: x not a matrix");
    assert_eq!(v.numel(), c, "broadcast: vector length {} != cols {c}", v.numel());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            out.set2(i, j, f(x.get2(i, j), v.data()[j]));
        }
    }
    out
}

fn sum_over_rows(g: &Tensor, target_shape: &[usize]) -> Tensor {
    let (r, c) = g.require_matrix().expect("sum_over_rows");
    let mut out = Tensor::zeros(target_shape);
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..r {
            s += g.get2(i, j);
        }
        out.data_mut()[j] = s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Checks analytic gradients of a scalar-valued builder against
    /// central finite differences on every input coordinate.
    fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let run = |tensors: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = tensors.iter().map(|t| g.var(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).scalar_value().unwrap()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.var(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.gradients_of(out, &vars).unwrap();

        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.numel() {
                let mut up = inputs.to_vec();
                up[i].data_mut()[j] += h;
                let mut down = inputs.to_vec();
                down[i].data_mut()[j] -= h;
                let fd = (run(&up) - run(&down)) / (2.0 * h);
                let an = grads[i].data()[j];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {i} coord {j}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        check_grads(
            &[a, b],
            &|g, v| {
                let s = g.add(v[0], v[1]);
                let d = g.sub(s, v[1]);
                let m = g.mul(d, v[0]);
                let q = g.div(m, v[1]);
                g.sum_all(q)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_transpose_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        check_grads(
            &[a, b],
            &|g, v| {
                let p = g.matmul(v[0], v[1]);
                let t = g.transpose(p);
                let sq = g.mul(t, t);
                g.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn activation_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Keep inputs away from the relu kink.
        let mut a = rand_tensor(&mut rng, &[4, 3], 0.2, 2.0);
        for (i, v) in a.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        check_grads(
            &[a.clone()],
            &|g, v| {
                let e = g.gelu(v[0]);
                g.sum_all(e)
            },
            1e-6,
        );
        check_grads(
            &[a],
            &|g, v| {
                let e = g.relu(v[0]);
                let sq = g.mul(e, e);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_family_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        check_grads(
            &[x.clone(), w.clone()],
            &|g, v| {
                let p = g.softmax_rows(v[0]);
                let m = g.mul(p, v[1]);
                g.sum_all(m)
            },
            1e-6,
        );
        check_grads(
            &[x.clone(), w],
            &|g, v| {
                let p = g.log_softmax_rows(v[0]);
                let m = g.mul(p, v[1]);
                g.sum_all(m)
            },
            1e-6,
        );
        check_grads(
            &[x],
            &|g, v| {
                let l = g.log_sum_exp_rows(v[0]);
                let sq = g.mul(l, l);
                g.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn reduction_and_broadcast_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[1, 3], 0.5, 1.5);
        let s = rand_tensor(&mut rng, &[4, 1], 0.5, 1.5);
        check_grads(
            &[x.clone(), v.clone()],
            &|g, vars| {
                let a = g.add_row_vec(vars[0], vars[1]);
                let m = g.mul_row_vec(a, vars[1]);
                let mr = g.mean_rows(m);
                let sq = g.mul(mr, mr);
                g.sum_all(sq)
            },
            1e-6,
        );
        check_grads(
            &[x, s],
            &|g, vars| {
                let sc = g.scale_rows(vars[0], vars[1]);
                let sq = g.mul(sc, sc);
                g.mean_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn rms_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let gain = rand_tensor(&mut rng, &[1, 6], 0.5, 1.5);
        check_grads(
            &[x.clone(), gain],
            &|g, v| {
                let y = g.rms_norm_rows(v[0], Some(v[1]));
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
        );
        check_grads(
            &[x],
            &|g, v| {
                let y = g.rms_norm_rows(v[0], None);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let x = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        check_grads(
            &[x.clone()],
            &|g, v| {
                let picked = g.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)]);
                let sq = g.mul(picked, picked);
                g.sum_all(sq)
            },
            1e-6,
        );
        check_grads(
            &[x.clone()],
            &|g, v| {
                let scat = g.scatter_add_rows(v[0], vec![1, 0, 1, 3, 2], 4);
                let sq = g.mul(scat, scat);
                g.sum_all(sq)
            },
            1e-6,
        );
        check_grads(
            &[x],
            &|g, v| {
                let e = g.gather_elems(v[0], vec![(0, 1), (4, 2), (0, 1)]);
                let sq = g.mul(e, e);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn slice_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let x = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        check_grads(
            &[x, y],
            &|g, v| {
                let left = g.slice_cols(v[0], 0, 3);
                let right = g.slice_cols(v[0], 3, 3);
                let m = g.mul(left, right);
                let cat = g.concat_cols(&[m, v[1]]);
                let sq = g.mul(cat, cat);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn composite_ffn_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let w11 = rand_tensor(&mut rng, &[4, 6], -0.5, 0.5);
        let w12 = rand_tensor(&mut rng, &[4, 6], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, &[6, 4], -0.5, 0.5);
        check_grads(
            &[x, w11, w12, w2],
            &|g, v| {
                let a = g.matmul(v[0], v[1]);
                let ga = g.gelu(a);
                let b = g.matmul(v[0], v[2]);
                let h = g.mul(ga, b);
                let y = g.matmul(h, v[3]);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(2.0));
        let unused = g.var(Tensor::zeros(&[2, 2]));
        let y = g.mul(x, x);
        let grads = g.gradients_of(y, &[x, unused]).unwrap();
        assert_eq!(grads[0].data(), &[4.0]);
        assert_eq!(grads[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x * x + x: dy/dx = 2x + 1.
        let mut g = Graph::new();
        let x = g.var(Tensor::scalar(3.0));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.gradients_of(y, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[7.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.var(Tensor::zeros(&[2, 2]));
        let y = g.add(x, x);
        let err = g.gradients_of(y, &[x]).unwrap_err();
        assert_eq!(
            err,
            GraphError::NonScalarOutput {
                shape: vec![2, 2]
            }
        );
    }

    #[test]
    fn forward_values_match_plain_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.var(x.clone());
        let wv = g.var(w.clone());
        let p = g.matmul(xv, wv);
        let sm = g.softmax_rows(p);
        let want = crate::ops::softmax_rows(&crate::ops::matmul(&x, &w).unwrap()).unwrap();
        assert!(g.value(sm).max_abs_diff(&want).unwrap() < 1e-14);
    }
}
