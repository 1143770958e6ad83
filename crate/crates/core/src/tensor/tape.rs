//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value and enough saved state
//! to run its backward rule. Nodes only reference earlier nodes, so a single
//! reverse sweep over the tape visits each node once in topological order.
//! Values can borrow from long-lived storage (model parameters) to avoid
//! copying them into every per-sample tape.

use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    Normalize(Var, Vec<f64>),
    SqDist(Var, Var),
    RbfMean(Var, Var, Vec<f64>),
    Mse(Var, Var),
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass.
///
/// A tape built with [`Tape::inference`] never marks anything as requiring
/// gradients; [`Tape::backward`] on it reports nothing reachable.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input, owned by the tape.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// Constant input borrowed from the caller.
    pub fn input(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Trainable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.node(v).shape.last().expect("non-empty shape")
    }

    // ---- ops -----------------------------------------------------------

    /// Matrix product of `a: M×K` and `b: K×N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {m}x{k} · {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(out), shape, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let c = self.last_dim(x);
        if self.value(row).len() != c {
            return Err(Error::shape(
                op_name,
                format!("row {:?} does not match last axis of {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(Cow::Owned(out), shape, op, rg))
    }

    /// `x + row`, broadcasting `row` over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x ⊙ row`, broadcasting `row` over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", Op::MulRow(x, row), |a, b| a * b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::AddScalar(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        super::validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = kernels::transpose(self.value(x), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), vec![c, r], Op::Transpose(x), rg))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {:?} vs {:?}", self.shape(first), self.shape(p)),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Cow::Owned(out), vec![rows, c], Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Join 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch {:?} vs {:?}", self.shape(first), self.shape(p)),
                ));
            }
            cols += pc;
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let v = self.value(p);
            for i in 0..r {
                out[i * cols + offset..i * cols + offset + pc]
                    .copy_from_slice(&v[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        let rg = self.rg(parts);
        Ok(self.push(Cow::Owned(out), vec![r, cols], Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Select rows of a 2-D tensor by index (repeats allowed). Also serves
    /// as embedding lookup when `x` is a table.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if index.is_empty() {
            return Err(Error::contract("gather_rows with an empty index set"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            vec![index.len(), c],
            Op::GatherRows(x, index.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {c}", start + len),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), vec![r, len], Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(x), rg)
    }

    /// Mean whose value does not depend on element order: elements are
    /// summed in ascending order. Gradient is that of [`Tape::mean`].
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::Exp(x), rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.last_dim(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::Softmax(x), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let c = self.last_dim(x);
        let mut out = self.value(x).to_vec();
        let mut rstds = Vec::with_capacity(out.len() / c);
        for row in out.chunks_exact_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Cow::Owned(out), shape, Op::Normalize(x, rstds), rg)
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let mut y = self.normalize(x, eps);
        if let Some(g) = gain {
            y = self.mul_row(y, g)?;
        }
        if let Some(b) = bias {
            y = self.add_row(y, b)?;
        }
        Ok(y)
    }

    /// Pairwise squared Euclidean distances between rows: `a: n×d`,
    /// `b: m×d` → `n×m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "sq_dist")?;
        let (m, d2) = self.dims2(b, "sq_dist")?;
        if d != d2 {
            return Err(Error::shape(
                "sq_dist",
                format!("feature dims disagree: {n}x{d} vs {m}x{d2}"),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &bv[j * d..(j + 1) * d];
                out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::SqDist(a, b), rg))
    }

    /// Mean over all row pairs of an RBF mixture kernel,
    /// `mean_ij Σ_s exp(-|a_i - b_j|² / (2 s²))`, without materializing the
    /// Gram matrix. Passing the same var twice uses the pair symmetry.
    pub fn rbf_mean(&mut self, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
        let (n, d) = self.dims2(a, "rbf_mean")?;
        let (m, d2) = self.dims2(b, "rbf_mean")?;
        if d != d2 {
            return Err(Error::shape("rbf_mean", format!("feature dims disagree: {n}x{d} vs {m}x{d2}")));
        }
        if n == 0 || m == 0 || bandwidths.is_empty() {
            return Err(Error::contract("rbf_mean needs rows and at least one bandwidth"));
        }
        let coefs = rbf_coefs(bandwidths);
        let (av, bv) = (self.value(a), self.value(b));
        let mut total = 0.0;
        if a == b {
            for i in 0..n {
                let ai = &av[i * d..(i + 1) * d];
                let mut row = 0.0;
                for j in i + 1..n {
                    row += rbf_pair(sq_dist_row(ai, &av[j * d..(j + 1) * d]), &coefs).0;
                }
                total += row;
            }
            total = 2.0 * total + (n * bandwidths.len()) as f64;
        } else {
            for i in 0..n {
                let ai = &av[i * d..(i + 1) * d];
                let mut row = 0.0;
                for j in 0..m {
                    row += rbf_pair(sq_dist_row(ai, &bv[j * d..(j + 1) * d]), &coefs).0;
                }
                total += row;
            }
        }
        let mean = total / (n * m) as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(vec![mean]), vec![1], Op::RbfMean(a, b, bandwidths.to_vec()), rg))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::Mse(a, b), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every reachable node
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(vec![(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with explicit upstream gradients on any nodes.
    /// Used when a loss couples several tapes.
    pub fn backward_from(&self, seeds: Vec<(Var, Vec<f64>)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::shape(
                    "backward",
                    format!("seed of length {} for node of shape {:?}", g.len(), self.shape(v)),
                ));
            }
            accumulate(&mut grads[v.0], &g);
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(a) {
                    let slot = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(g, self.value(*b), slot, m, n, k);
                }
                if wants(b) {
                    let slot = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(self.value(*a), g, slot, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, row) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g);
                }
                if wants(row) {
                    let c = self.value(*row).len();
                    let slot = slot(grads, *row, c);
                    for chunk in g.chunks_exact(c) {
                        for (s, v) in slot.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row);
                let c = r.len();
                if wants(x) {
                    let d: Vec<f64> = g
                        .chunks_exact(c)
                        .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a * b))
                        .collect();
                    accumulate(&mut grads[x.0], &d);
                }
                if wants(row) {
                    let xv = self.value(*x);
                    let slot = slot(grads, *row, c);
                    for (gc, xc) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ((s, a), b) in slot.iter_mut().zip(gc).zip(xc) {
                            *s += a * b;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(x) {
                    let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Transpose(x) => {
                if wants(x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    // g has shape c×r
                    let d = kernels::transpose(g, c, r);
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape(*p)[1];
                    if wants(p) {
                        let slot = slot(grads, *p, r * pc);
                        for i in 0..r {
                            for (s, v) in slot[i * pc..(i + 1) * pc]
                                .iter_mut()
                                .zip(&g[i * cols + offset..i * cols + offset + pc])
                            {
                                *s += v;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::GatherRows(x, index) => {
                if wants(x) {
                    let c = self.shape(*x)[1];
                    let len = self.value(*x).len();
                    let slot = slot(grads, *x, len);
                    for (k, &i) in index.iter().enumerate() {
                        for (s, v) in slot[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if wants(x) {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = node.shape[1];
                    let slot = slot(grads, *x, r * c);
                    for i in 0..r {
                        for (s, v) in slot[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                        {
                            *s += v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let d = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let n = self.value(*x).len();
                    let d = vec![g[0] / n as f64; n];
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Exp(x) => {
                if wants(x) {
                    let d: Vec<f64> = g.iter().zip(node.value.iter()).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Softmax(x) => {
                if wants(x) {
                    let c = *node.shape.last().unwrap();
                    let mut d = vec![0.0; g.len()];
                    for ((dc, gc), yc) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(node.value.chunks_exact(c))
                    {
                        let inner: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dc.iter_mut().zip(gc).zip(yc) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::Normalize(x, rstds) => {
                if wants(x) {
                    let c = *node.shape.last().unwrap();
                    let mut d = vec![0.0; g.len()];
                    for (((dc, gc), yc), rstd) in d
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(node.value.chunks_exact(c))
                        .zip(rstds)
                    {
                        let gm = gc.iter().sum::<f64>() / c as f64;
                        let gym = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, gv), yv) in dc.iter_mut().zip(gc).zip(yc) {
                            *o = rstd * (gv - gm - yv * gym);
                        }
                    }
                    accumulate(&mut grads[x.0], &d);
                }
            }
            Op::SqDist(a, b) => {
                let (n, dim) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; n * dim];
                let mut db = vec![0.0; m * dim];
                for i in 0..n {
                    let ai = &av[i * dim..(i + 1) * dim];
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        let bj = &bv[j * dim..(j + 1) * dim];
                        for k in 0..dim {
                            let diff = w * (ai[k] - bj[k]);
                            da[i * dim + k] += diff;
                            db[j * dim + k] -= diff;
                        }
                    }
                }
                if wants(a) {
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::RbfMean(a, b, bandwidths) => {
                let coefs = rbf_coefs(bandwidths);
                let (n, dim) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g[0] / (n * m) as f64;
                let mut da = vec![0.0; n * dim];
                if a == b {
                    // Each unordered pair appears twice in the mean.
                    for i in 0..n {
                        for j in i + 1..n {
                            let (ai, aj) = (&av[i * dim..(i + 1) * dim], &av[j * dim..(j + 1) * dim]);
                            let w = 2.0 * scale * rbf_pair(sq_dist_row(ai, aj), &coefs).1;
                            for k in 0..dim {
                                let diff = w * (ai[k] - aj[k]);
                                da[i * dim + k] += diff;
                                da[j * dim + k] -= diff;
                            }
                        }
                    }
                    if wants(a) {
                        accumulate(&mut grads[a.0], &da);
                    }
                } else {
                    let mut db = vec![0.0; m * dim];
                    for i in 0..n {
                        let ai = &av[i * dim..(i + 1) * dim];
                        for j in 0..m {
                            let bj = &bv[j * dim..(j + 1) * dim];
                            let w = scale * rbf_pair(sq_dist_row(ai, bj), &coefs).1;
                            for k in 0..dim {
                                let diff = w * (ai[k] - bj[k]);
                                da[i * dim + k] += diff;
                                db[j * dim + k] -= diff;
                            }
                        }
                    }
                    if wants(a) {
                        accumulate(&mut grads[a.0], &da);
                    }
                    if wants(b) {
                        accumulate(&mut grads[b.0], &db);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / av.len() as f64;
                let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if wants(a) {
                    accumulate(&mut grads[a.0], &d);
                }
                if wants(b) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` was unreachable or does not
    /// require gradients (equivalent to a zero gradient).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn rbf_coefs(bandwidths: &[f64]) -> Vec<f64> {
    bandwidths.iter().map(|s| -1.0 / (2.0 * s * s)).collect()
}

/// Kernel value and its derivative with respect to the squared distance.
#[inline]
fn rbf_pair(d2: f64, coefs: &[f64]) -> (f64, f64) {
    let (mut k, mut dk) = (0.0, 0.0);
    for &c in coefs {
        let e = (c * d2).exp();
        k += e;
        dk += c * e;
    }
    (k, dk)
}

#[inline]
fn sq_dist_row(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
