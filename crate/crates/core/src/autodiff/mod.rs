//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! whatever the backward rule needs. [`Graph::backward`] walks the nodes in
//! exact reverse creation order, so identical graphs always produce bitwise
//! identical gradients.
//!
//! ```
//! use splatseg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Only scalar-tensor broadcasting exists; bias addition is the explicit
//! [`Graph::add_bias`] op.

mod check;
pub mod checkpoint;
mod rowmap;
mod tensor;

use std::sync::Arc;

use thiserror::Error;

pub use check::{grad_check, grad_check_many, rel_err, GradCheckOptions, GradCheckReport};
pub use rowmap::{ConvRulebook, SparseRowMap};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use tensor::Tensor;

use tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw};

/// Rows whose norm is below this are treated as having this norm.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    RowSoftmax(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CosineRows { a: Var, b: Var, na: Vec<f64>, nb: Vec<f64> },
    Mean(Var),
    Sum(Var),
    SparseConv { input: Var, kernel: Var, rules: Arc<ConvRulebook> },
    RowMap(Var, Arc<SparseRowMap>),
    GroupAttention { q: Var, k: Var, v: Var, sets: Arc<Vec<Vec<u32>>>, scale: f64, weights: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build it, call [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_inputs: Vec<Var>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Sign pattern (`x > 0`) of every ReLU input recorded so far.
    ///
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every rectifier in the graph.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for v in &self.relu_inputs {
            out.extend(self.nodes[v.0].value.data().iter().map(|&x| x > 0.0));
        }
        out
    }

    fn matrix_shape(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(mismatch(op, &[t.shape()]));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.matrix_shape(a, "matmul")?;
        let (k2, m) = self.matrix_shape(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::matrix(n, m, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if ta.len() == 1 && ta.rank() == 0 {
            let s = ta.item();
            let data = tb.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(tb.shape().to_vec(), data)
        } else if tb.len() == 1 && tb.rank() == 0 {
            let s = tb.item();
            let data = ta.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else {
            Err(mismatch(op, &[ta.shape(), tb.shape()]))
        }
    }

    /// Elementwise sum; either side may be a rank-0 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product; either side may be a rank-0 scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x (n×c) + b (1×c)` applied to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(x, "add_bias")?;
        let (br, bc) = self.matrix_shape(b, "add_bias")?;
        if br != 1 || bc != c {
            return Err(mismatch("add_bias", &[self.value(x).shape(), self.value(b).shape()]));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in data[r * c..(r + 1) * c].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.relu_inputs.push(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(mismatch("concat", &[]));
        }
        let n = self.matrix_shape(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_shape(p, "concat")?;
            if r != n {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
                return Err(mismatch("concat", &shapes));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.matrix_shape(x, "transpose")?;
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var, AutodiffError> {
        let idx: Arc<[usize]> = idx.into();
        let (n, c) = self.matrix_shape(x, "gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        let src = self.value(x);
        for &i in idx.iter() {
            if i >= n {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx), rg))
    }

    /// `out[idx[r]] += x[r]` into `out_rows` zero rows.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        idx: impl Into<Arc<[usize]>>,
        out_rows: usize,
    ) -> Result<Var, AutodiffError> {
        let idx: Arc<[usize]> = idx.into();
        let (n, c) = self.matrix_shape(x, "scatter_add_rows")?;
        if idx.len() != n {
            return Err(mismatch("scatter_add_rows", &[self.value(x).shape(), &[idx.len()]]));
        }
        let mut out = Tensor::zeros(&[out_rows, c]);
        let src = self.value(x);
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    bound: out_rows,
                });
            }
            for (o, v) in out.row_mut(i).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ScatterAddRows(x, idx), rg))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(x, "row_softmax")?;
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            let row = &mut data[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::matrix(n, c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RowSoftmax(x), rg))
    }

    /// Per-row cross-entropy `−log softmax(logits)[target]`, as an n×1 column.
    ///
    /// Fused: the log-sum-exp is stabilised by subtracting the row max.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(mismatch(
                "softmax_cross_entropy",
                &[self.value(logits).shape(), &[targets.len()]],
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut losses = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            losses.push(lse - row[t]);
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = Tensor::matrix(n, 1, losses)?;
        let rg = self.rg(&[logits]);
        let targets = targets.to_vec();
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, probs, targets }, rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(x, "l2_normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &mut data[r * c..(r + 1) * c];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= nrm;
            }
            norms.push(nrm);
        }
        let value = Tensor::matrix(n, c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Row-wise cosine similarity of two equally shaped matrices, as n×1.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(a, "cosine_rows")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("cosine_rows", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let ra = &ta[r * c..(r + 1) * c];
            let rb = &tb[r * c..(r + 1) * c];
            let x = ra.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            let y = rb.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            let dot: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
            out.push(dot / (x * y));
            na.push(x);
            nb.push(y);
        }
        let value = Tensor::matrix(n, 1, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::CosineRows { a, b, na, nb }, rg))
    }

    /// Mean of all elements as a rank-0 scalar. The mean of nothing is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        let v = if t.is_empty() { 0.0 } else { s / t.len() as f64 };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sparse convolution driven by a precomputed rulebook.
    ///
    /// `input` is `n_in × c_in`, `kernel` is `taps × c_in × c_out`; output row
    /// `o` sums `input[i] · kernel[t]` over every rule `(i, o)` of tap `t`.
    pub fn sparse_conv(
        &mut self,
        input: Var,
        kernel: Var,
        rules: Arc<ConvRulebook>,
    ) -> Result<Var, AutodiffError> {
        let (n_in, c_in) = self.matrix_shape(input, "sparse_conv")?;
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[0] != rules.taps() || ks[1] != c_in || n_in != rules.n_in() {
            return Err(mismatch(
                "sparse_conv",
                &[self.value(input).shape(), &ks, &[rules.taps(), rules.n_in()]],
            ));
        }
        let c_out = ks[2];
        let mut out = Tensor::zeros(&[rules.n_out(), c_out]);
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let o = out.data_mut();
            for (t, pairs) in rules.iter() {
                let w = &k[t * c_in * c_out..(t + 1) * c_in * c_out];
                for &(i, j) in pairs {
                    let (i, j) = (i as usize, j as usize);
                    let xr = &x[i * c_in..(i + 1) * c_in];
                    let or = &mut o[j * c_out..(j + 1) * c_out];
                    for (p, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, wv) in or.iter_mut().zip(&w[p * c_out..(p + 1) * c_out]) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(out, Op::SparseConv { input, kernel, rules }, rg))
    }

    /// Applies a fixed sparse row-mixing operator: `out[p] = Σ w · x[i]`.
    pub fn row_map(&mut self, x: Var, map: Arc<SparseRowMap>) -> Result<Var, AutodiffError> {
        let (n, c) = self.matrix_shape(x, "row_map")?;
        if n != map.n_in() {
            return Err(mismatch("row_map", &[self.value(x).shape(), &[map.n_in()]]));
        }
        let data = map.apply(self.value(x).data(), c);
        let value = Tensor::matrix(map.n_out(), c, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::RowMap(x, map), rg))
    }

    /// Scaled dot-product attention where query row `i` attends only to the
    /// key/value rows listed in `sets[i]`:
    /// `out_i = Σ_j softmax_j(scale · q_i·k_j) · v_j`. Empty sets give zero rows.
    pub fn group_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sets: Arc<Vec<Vec<u32>>>,
        scale: f64,
    ) -> Result<Var, AutodiffError> {
        let (nq, dq) = self.matrix_shape(q, "group_attention")?;
        let (nk, dk) = self.matrix_shape(k, "group_attention")?;
        let (nv, dv) = self.matrix_shape(v, "group_attention")?;
        if dq != dk || nk != nv || sets.len() != nq {
            return Err(mismatch(
                "group_attention",
                &[self.value(q).shape(), self.value(k).shape(), self.value(v).shape(), &[sets.len()]],
            ));
        }
        if let Some(&bad) = sets.iter().flatten().find(|&&j| j as usize >= nk) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "group_attention",
                index: bad as usize,
                bound: nk,
            });
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; nq * dv];
        let mut weights = Vec::with_capacity(nq);
        for (i, set) in sets.iter().enumerate() {
            let scores: Vec<f64> = set
                .iter()
                .map(|&j| scale * tq.row(i).iter().zip(tk.row(j as usize)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|x| x / z).collect();
            let row = &mut out[i * dv..(i + 1) * dv];
            for (&j, &wj) in set.iter().zip(&w) {
                for (o, x) in row.iter_mut().zip(tv.row(j as usize)) {
                    *o += wj * x;
                }
            }
            weights.push(w);
        }
        let rg = self.rg(&[q, k, v]);
        let value = Tensor::matrix(nq, dv, out)?;
        Ok(self.push(value, Op::GroupAttention { q, k, v, sets, scale, weights }, rg))
    }

    /// Reverse pass from a scalar `loss`. A graph can be consumed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&shape, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |v: Var, delta: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => {
                        for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_nt_raw(g.data(), tb.data(), n, m, k);
                        acc(*a, Tensor::matrix(n, k, ga).unwrap());
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn_raw(ta.data(), g.data(), n, k, m);
                        acc(*b, Tensor::matrix(k, m, gb).unwrap());
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let t = val(v);
                        if t.shape() == g.shape() {
                            acc(v, g.clone());
                        } else {
                            acc(v, Tensor::scalar(g.data().iter().sum()));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        let (t, o) = (val(v), val(other));
                        if t.shape() == g.shape() {
                            let d: Vec<f64> = if o.shape() == g.shape() {
                                g.data().iter().zip(o.data()).map(|(x, y)| x * y).collect()
                            } else {
                                let s = o.item();
                                g.data().iter().map(|x| x * s).collect()
                            };
                            acc(v, Tensor::new(t.shape().to_vec(), d).unwrap());
                        } else {
                            let s: f64 = g.data().iter().zip(o.data()).map(|(x, y)| x * y).sum();
                            acc(v, Tensor::scalar(s));
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.data().iter().map(|x| x * c).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::matrix(1, c, gb).unwrap());
                    acc(*x, g);
                }
                Op::Relu(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    acc(*x, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                Op::Concat(parts) => {
                    let n = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        let mut d = Vec::with_capacity(n * c);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[off..off + c]);
                        }
                        off += c;
                        acc(p, Tensor::matrix(n, c, d).unwrap());
                    }
                }
                Op::Transpose(x) => acc(*x, g.transpose()),
                Op::GatherRows(x, idx) => {
                    let t = val(*x);
                    let mut d = Tensor::zeros(t.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*x, d);
                }
                Op::ScatterAddRows(x, idx) => {
                    let c = g.cols();
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &i in idx.iter() {
                        d.extend_from_slice(g.row(i));
                    }
                    acc(*x, Tensor::matrix(idx.len(), c, d).unwrap());
                }
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, Tensor::matrix(y.rows(), c, d).unwrap());
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets: t } => {
                    let c = val(*logits).cols();
                    let mut d = probs.clone();
                    for (r, &tr) in t.iter().enumerate() {
                        d[r * c + tr] -= 1.0;
                        let gr = g.data()[r];
                        for v in &mut d[r * c..(r + 1) * c] {
                            *v *= gr;
                        }
                    }
                    acc(*logits, Tensor::matrix(t.len(), c, d).unwrap());
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    acc(*x, Tensor::matrix(y.rows(), c, d).unwrap());
                }
                Op::CosineRows { a, b, na, nb } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let c = ta.cols();
                    let n = ta.rows();
                    let mut da = vec![0.0; n * c];
                    let mut db = vec![0.0; n * c];
                    for r in 0..n {
                        let (ra, rb) = (ta.row(r), tb.row(r));
                        let cos = node.value.data()[r];
                        let gr = g.data()[r];
                        let inv = 1.0 / (na[r] * nb[r]);
                        for j in 0..c {
                            da[r * c + j] = gr * (rb[j] * inv - cos * ra[j] / (na[r] * na[r]));
                            db[r * c + j] = gr * (ra[j] * inv - cos * rb[j] / (nb[r] * nb[r]));
                        }
                    }
                    acc(*a, Tensor::matrix(n, c, da).unwrap());
                    acc(*b, Tensor::matrix(n, c, db).unwrap());
                }
                Op::Mean(x) => {
                    let t = val(*x);
                    let s = if t.is_empty() { 0.0 } else { g.item() / t.len() as f64 };
                    acc(*x, Tensor::filled(t.shape(), s));
                }
                Op::Sum(x) => {
                    let t = val(*x);
                    acc(*x, Tensor::filled(t.shape(), g.item()));
                }
                Op::SparseConv { input, kernel, rules } => {
                    let (x, k) = (val(*input), val(*kernel));
                    let (c_in, c_out) = (x.cols(), k.shape()[2]);
                    let want_x = self.nodes[input.0].requires_grad;
                    let want_k = self.nodes[kernel.0].requires_grad;
                    let mut gx = vec![0.0; x.len()];
                    let mut gk = vec![0.0; k.len()];
                    let gd = g.data();
                    for (t, pairs) in rules.iter() {
                        let base = t * c_in * c_out;
                        let w = &k.data()[base..base + c_in * c_out];
                        for &(i, j) in pairs {
                            let (i, j) = (i as usize, j as usize);
                            let gr = &gd[j * c_out..(j + 1) * c_out];
                            let xr = &x.data()[i * c_in..(i + 1) * c_in];
                            for p in 0..c_in {
                                let wr = &w[p * c_out..(p + 1) * c_out];
                                if want_x {
                                    gx[i * c_in + p] += wr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if want_k && xr[p] != 0.0 {
                                    let gkr = &mut gk[base + p * c_out..base + (p + 1) * c_out];
                                    for (o, v) in gkr.iter_mut().zip(gr) {
                                        *o += xr[p] * v;
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        acc(*input, Tensor::new(x.shape().to_vec(), gx).unwrap());
                    }
                    if want_k {
                        acc(*kernel, Tensor::new(k.shape().to_vec(), gk).unwrap());
                    }
                }
                Op::RowMap(x, map) => {
                    let t = val(*x);
                    let d = map.apply_transpose(g.data(), t.cols());
                    acc(*x, Tensor::new(t.shape().to_vec(), d).unwrap());
                }
                Op::GroupAttention { q, k, v, sets, scale, weights } => {
                    let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                    let mut gq = Tensor::zeros(tq.shape());
                    let mut gk = Tensor::zeros(tk.shape());
                    let mut gv = Tensor::zeros(tv.shape());
                    for (i, (set, w)) in sets.iter().zip(weights).enumerate() {
                        let gi = g.row(i);
                        let dw: Vec<f64> = set
                            .iter()
                            .map(|&j| gi.iter().zip(tv.row(j as usize)).map(|(a, b)| a * b).sum())
                            .collect();
                        let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                        for ((&j, &wj), &dwj) in set.iter().zip(w).zip(&dw) {
                            let j = j as usize;
                            for (o, x) in gv.row_mut(j).iter_mut().zip(gi) {
                                *o += wj * x;
                            }
                            let ds = scale * wj * (dwj - mean);
                            for (o, x) in gq.row_mut(i).iter_mut().zip(tk.row(j)) {
                                *o += ds * x;
                            }
                            for (o, x) in gk.row_mut(j).iter_mut().zip(tq.row(i)) {
                                *o += ds * x;
                            }
                        }
                    }
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
