//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every primitive appends a node holding its
//! forward value and, when any input requires a gradient, the record needed
//! to propagate gradients back to its inputs. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for [`Graph::backward`].
//!
//! ```
//! use prefixmtl::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sum { a: Var },
    Reshape { a: Var },
    Permute0213 { a: Var },
    GatherRows { a: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Tape of primitive operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c (+)= op(a) @ op(b)` on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape(a_shape, a).expect("gemm lhs shape");
    let bv = ArrayView2::from_shape(b_shape, b).expect("gemm rhs shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let mut cv = ndarray::ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c)
        .expect("gemm output shape");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const K: f64 = 0.044_715;
    let inner = C * (x + K * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (value, deriv)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.requires(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a @ b` for matrices, or `a @ bᵀ` when `trans_b` is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (sb[0], sb[1]),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, &[a, b], Op::MatMul { a, b, trans_b }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]` (or `[n, p, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (a_len, b_len) = (m * k, sb[1] * sb[2]);
        for i in 0..batch {
            gemm(
                &av[i * a_len..(i + 1) * a_len],
                (m, k),
                false,
                &bv[i * b_len..(i + 1) * b_len],
                (sb[1], sb[2]),
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let value = Tensor::new(vec![batch, m, p], out)?;
        self.push(value, &[a, b], Op::BatchMatMul { a, b, trans_b }, "batch_matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a, b], Op::Add { a, b }, "add")
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(Error::shape("add_row", sa, sb));
        }
        let bias_data = self.value(bias).data();
        let width = bias_data.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_data[i % width])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(value, &[a, bias], Op::AddRow { a, bias }, "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a, b], Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a], Op::Scale { a, factor }, "scale")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a], Op::Softmax { a, axis }, "softmax")
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance, then
    /// applies the affine map `gamma * x + beta` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| x[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (x[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = inv;
                for j in 0..n {
                    let h = (x[at(j)] - mean) * inv;
                    xhat[at(j)] = h;
                    out[at(j)] = h * g[j] + b[j];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            &[a, gamma, beta],
            Op::LayerNorm {
                a,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a], Op::Gelu { a }, "gelu")
    }

    /// Rows of a `[vocab, dim]` table selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[ids.len()]));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::shape("embedding", shape, &[bad]));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        self.push(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Inverted dropout. `p = 0` returns `a` unchanged without a tape record.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a], Op::Dropout { a, mask }, "dropout")
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]` for `[rows, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::shape("cross_entropy", &shape, &[bad]));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - log_z).exp();
            }
            total += log_z - row[targets[r]];
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Replaces elements where `mask` is true with `fill`; those positions get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("masked_fill", self.shape(a), &[mask.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(
            value,
            &[a],
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            "masked_fill",
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), &[a], Op::Sum { a }, "sum")
            .expect("finite inputs sum to a finite value")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, &[a], Op::Reshape { a }, "reshape")
    }

    /// Swaps the two middle axes of a rank-4 tensor: `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("permute_0213", &s, &[4]));
        }
        let x = self.value(a).data();
        let out = permute_0213_data(x, [s[0], s[1], s[2], s[3]]);
        let value = Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?;
        self.push(value, &[a], Op::Permute0213 { a }, "permute_0213")
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", &shape, &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape("gather_rows", &shape, &[bad]));
        }
        let width = shape[1];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let value = Tensor::new(vec![rows.len(), width], out)?;
        self.push(
            value,
            &[a],
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Fills the gradient of every node reachable from the scalar `loss`, then
    /// clears the operation records. Gradients stay readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), upstream)?);
            }
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dY @ op(B)ᵀ
                acc(*a, &mut |g| gemm(dy, (m, n), false, bv, (sb[0], sb[1]), !*trans_b, g, true));
                if *trans_b {
                    // B is [n, k]: dB = dYᵀ @ A
                    acc(*b, &mut |g| gemm(dy, (m, n), true, av, (sa[0], sa[1]), false, g, true));
                } else {
                    // dB = Aᵀ @ dY
                    acc(*b, &mut |g| gemm(av, (sa[0], sa[1]), true, dy, (m, n), false, g, true));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (batch, m, p) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (a_len, b_len, y_len) = (sa[1] * sa[2], sb[1] * sb[2], m * p);
                acc(*a, &mut |g| {
                    for i in 0..batch {
                        gemm(
                            &dy[i * y_len..(i + 1) * y_len],
                            (m, p),
                            false,
                            &bv[i * b_len..(i + 1) * b_len],
                            (sb[1], sb[2]),
                            !*trans_b,
                            &mut g[i * a_len..(i + 1) * a_len],
                            true,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..batch {
                        let dyi = &dy[i * y_len..(i + 1) * y_len];
                        let ai = &av[i * a_len..(i + 1) * a_len];
                        let gi = &mut g[i * b_len..(i + 1) * b_len];
                        if *trans_b {
                            gemm(dyi, (m, p), true, ai, (sa[1], sa[2]), false, gi, true);
                        } else {
                            gemm(ai, (sa[1], sa[2]), true, dyi, (m, p), false, gi, true);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    acc(*v, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                }
            }
            Op::AddRow { a, bias } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*bias, &mut |g| {
                    let width = g.len();
                    for (i, d) in dy.iter().enumerate() {
                        g[i % width] += d;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * factor));
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*a, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                g[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |g| {
                    for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                        g[(i / inner) % n] += d * h;
                    }
                });
                acc(*beta, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[(i / inner) % n] += d;
                    }
                });
                acc(*a, &mut |g| {
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..n {
                                let d = dy[at(j)] * gv[j];
                                sum_d += d;
                                sum_dh += d * xhat[at(j)];
                            }
                            let inv = inv_std[o * inner + i];
                            for j in 0..n {
                                let d = dy[at(j)] * gv[j];
                                g[at(j)] += inv / nf * (nf * d - sum_d - xhat[at(j)] * sum_dh);
                            }
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_parts(x[i]).1;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = self.shape(*table)[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &dy[r * dim..(r + 1) * dim];
                        g[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let classes = probs.len() / rows;
                let scale = dy[0] / rows as f64;
                acc(*logits, &mut |g| {
                    for r in 0..rows {
                        for c in 0..classes {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            g[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if !mask[i] {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Permute0213 { a } => {
                let s = node.value.shape();
                // the output is [d0, d2, d1, d3]; permuting it again restores the input layout
                let back = permute_0213_data(dy, [s[0], s[1], s[2], s[3]]);
                acc(*a, &mut |g| g.iter_mut().zip(&back).for_each(|(g, d)| *g += d));
            }
            Op::GatherRows { a, rows } => {
                let width = node.value.shape()[1];
                acc(*a, &mut |g| {
                    for (r, &src) in rows.iter().enumerate() {
                        g[src * width..(src + 1) * width]
                            .iter_mut()
                            .zip(&dy[r * width..(r + 1) * width])
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
        }
    }
}

fn permute_0213_data(x: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let src = ((i * d1 + j) * d2 + k) * d3;
                let dst = ((i * d2 + k) * d1 + j) * d3;
                out[dst..dst + d3].copy_from_slice(&x[src..src + d3]);
            }
        }
    }
    out
}
