//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! Every operation appends a node holding its value and the recipe for its
//! vector-Jacobian product. Parents always precede children on the tape, so a
//! single reverse sweep is a valid topological order.

use super::array::{matmul_into, matmul_nt_into, matmul_tn_into, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows { x: Var, scale: f64 },
    Conv1d { x: Var, kernel: Var, bias: Var },
    Conv2d { x: Var, kernel: Var, bias: Var },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RowDiff(Var),
    Gather { x: Var, indices: Vec<usize> },
    Bce { s: Var, target: f64, eps: f64 },
    Sum(Var),
    Mean(Var),
    Variance(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// A computation graph built for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::Dimension {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", av)?;
        let (k2, n) = require_matrix("matmul", bv)?;
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Array::raw(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul_nt", av)?;
        let (n, k2) = require_matrix("matmul_nt", bv)?;
        if k != k2 {
            return Err(dim_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Array::raw(vec![m, n], out), Op::MatMulNt(a, b)))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op_name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        Ok(self.push(Array::raw(shape, data), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(dim_err("add_row_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Array::raw(shape, data), Op::AddRowBias(x, bias)))
    }

    /// Affine layer `x·w + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row_bias(y, bias)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("log of a non-positive value".into()));
        }
        let value = xv.map(f64::ln);
        Ok(self.push(value, Op::Log(x)))
    }

    /// Row-wise softmax of `x / scale`, shifted by the row maximum.
    pub fn softmax_rows(&mut self, x: Var, scale: f64) -> Result<Var> {
        if scale.is_nan() || scale <= 0.0 {
            return Err(Error::Parameter(format!("softmax scale must be positive, got {scale}")));
        }
        let xv = self.value(x);
        let (_, n) = require_matrix("softmax_rows", xv)?;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row, scale);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Array::raw(shape, data), Op::SoftmaxRows { x, scale }))
    }

    /// Same-length temporal convolution of a t×d_in sequence with a
    /// w×d_in×d_out kernel, zero padded.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (t, d_in) = require_matrix("conv1d", xv)?;
        let &[w, k_in, d_out] = kv.shape() else {
            return Err(dim_err("conv1d", xv, kv));
        };
        if w % 2 == 0 {
            return Err(Error::Parameter(format!("conv1d kernel width must be odd, got {w}")));
        }
        if k_in != d_in {
            return Err(dim_err("conv1d", xv, kv));
        }
        if bv.len() != d_out {
            return Err(dim_err("conv1d", kv, bv));
        }
        let half = w / 2;
        let mut out = Vec::with_capacity(t * d_out);
        for _ in 0..t {
            out.extend_from_slice(bv.data());
        }
        let (xd, kd) = (xv.data(), kv.data());
        for i in 0..t {
            let orow = &mut out[i * d_out..(i + 1) * d_out];
            for tap in 0..w {
                let Some(src) = (i + tap).checked_sub(half).filter(|&s| s < t) else {
                    continue;
                };
                let xrow = &xd[src * d_in..(src + 1) * d_in];
                let kslab = &kd[tap * d_in * d_out..(tap + 1) * d_in * d_out];
                for (c, &xc) in xrow.iter().enumerate() {
                    if xc == 0.0 {
                        continue;
                    }
                    for (o, &kw) in orow.iter_mut().zip(&kslab[c * d_out..(c + 1) * d_out]) {
                        *o += xc * kw;
                    }
                }
            }
        }
        Ok(self.push(Array::raw(vec![t, d_out], out), Op::Conv1d { x, kernel, bias }))
    }

    /// Same-size 2D convolution of a single-channel h×w map with a
    /// kh×kw×c_out kernel, zero padded. Output is h×w×c_out.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let (h, w) = require_matrix("conv2d", xv)?;
        let &[kh, kw, c_out] = kv.shape() else {
            return Err(dim_err("conv2d", xv, kv));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv2d kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        if bv.len() != c_out {
            return Err(dim_err("conv2d", kv, bv));
        }
        let (hh, hw) = (kh / 2, kw / 2);
        let mut out = Vec::with_capacity(h * w * c_out);
        for _ in 0..h * w {
            out.extend_from_slice(bv.data());
        }
        let (xd, kd) = (xv.data(), kv.data());
        for i in 0..h {
            for a in 0..kh {
                let Some(si) = (i + a).checked_sub(hh).filter(|&s| s < h) else {
                    continue;
                };
                for j in 0..w {
                    let orow = &mut out[(i * w + j) * c_out..(i * w + j + 1) * c_out];
                    for b in 0..kw {
                        let Some(sj) = (j + b).checked_sub(hw).filter(|&s| s < w) else {
                            continue;
                        };
                        let xval = xd[si * w + sj];
                        let taps = &kd[(a * kw + b) * c_out..(a * kw + b + 1) * c_out];
                        for (o, &kv) in orow.iter_mut().zip(taps) {
                            *o += xval * kv;
                        }
                    }
                }
            }
        }
        Ok(self.push(Array::raw(vec![h, w, c_out], out), Op::Conv2d { x, kernel, bias }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = require_matrix("slice_cols", xv)?;
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, start + len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Array::raw(vec![m, len], data), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = require_matrix("concat_cols", self.value(first))?.0;
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            let (pm, pn) = require_matrix("concat_cols", pv)?;
            if pm != m {
                return Err(dim_err("concat_cols", self.value(first), pv));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Array::raw(vec![m, total], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Successive row differences: `out[i] = x[i+1] - x[i]`.
    pub fn row_diff(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (t, n) = require_matrix("row_diff", xv)?;
        if t < 2 {
            return Err(Error::SequenceTooShort { needed: 2, got: t });
        }
        let d = xv.data();
        let data = (0..(t - 1) * n).map(|i| d[i + n] - d[i]).collect();
        Ok(self.push(Array::raw(vec![t - 1, n], data), Op::RowDiff(x)))
    }

    /// Picks flat elements of `x` into a 1-D array.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Contract(format!("gather index {bad} out of {}", xv.len())));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        Ok(self.push(
            Array::raw(vec![indices.len()], data),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Elementwise binary cross-entropy against a constant target, with the
    /// probability clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, s: Var, target: f64, eps: f64) -> Var {
        let value = self.value(s).map(|p| bce(p, target, eps));
        self.push(value, Op::Bce { s, target, eps })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Array::scalar(xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, x: Var) -> Var {
        let value = Array::scalar(population_variance(self.value(x).data()));
        self.push(value, Op::Variance(x))
    }

    /// Which side of every non-smooth point the forward pass landed on:
    /// ReLU input signs, gathered indices and BCE clamp regions. Two passes
    /// with equal patterns lie in the same differentiable piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| usize::from(v > 0.0))),
                Op::Gather { indices, .. } => out.extend_from_slice(indices),
                Op::Bce { s, eps, .. } => out.extend(self.value(*s).data().iter().map(|&p| {
                    if p < *eps {
                        0
                    } else if p > 1.0 - *eps {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Array| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_into(av.data(), g.data(), &mut db, m, k, n);
                acc(*a, Array::raw(av.shape().to_vec(), da));
                acc(*b, Array::raw(bv.shape().to_vec(), db));
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                matmul_tn_into(g.data(), av.data(), &mut db, m, n, k);
                acc(*a, Array::raw(av.shape().to_vec(), da));
                acc(*b, Array::raw(bv.shape().to_vec(), db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, bv, |gi, bi| gi * bi));
                acc(*b, zip(g, av, |gi, ai| gi * ai));
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, Array::raw(self.value(*bias).shape().to_vec(), db));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Relu(x) => acc(*x, zip(g, self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(x) => acc(*x, zip(g, out, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Log(x) => acc(*x, zip(g, self.value(*x), |gi, xi| gi / xi)),
            Op::SoftmaxRows { x, scale } => {
                let n = out.shape()[1].max(1);
                let mut dx = Vec::with_capacity(out.len());
                for (yrow, grow) in out.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                    dx.extend(yrow.iter().zip(grow).map(|(y, gi)| y * (gi - dot) / scale));
                }
                acc(*x, Array::raw(out.shape().to_vec(), dx));
            }
            Op::Conv1d { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (t, d_in) = (xv.shape()[0], xv.shape()[1]);
                let (w, d_out) = (kv.shape()[0], kv.shape()[2]);
                let half = w / 2;
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                let mut dx = vec![0.0; t * d_in];
                let mut dk = vec![0.0; w * d_in * d_out];
                let mut db = vec![0.0; d_out];
                for i in 0..t {
                    let grow = &gd[i * d_out..(i + 1) * d_out];
                    for (d, v) in db.iter_mut().zip(grow) {
                        *d += v;
                    }
                    for tap in 0..w {
                        let Some(src) = (i + tap).checked_sub(half).filter(|&s| s < t) else {
                            continue;
                        };
                        let base = tap * d_in * d_out;
                        for c in 0..d_in {
                            let krow = &kd[base + c * d_out..base + (c + 1) * d_out];
                            dx[src * d_in + c] += krow.iter().zip(grow).map(|(k, gi)| k * gi).sum::<f64>();
                            let xc = xd[src * d_in + c];
                            if xc != 0.0 {
                                let dkrow = &mut dk[base + c * d_out..base + (c + 1) * d_out];
                                for (d, gi) in dkrow.iter_mut().zip(grow) {
                                    *d += xc * gi;
                                }
                            }
                        }
                    }
                }
                acc(*x, Array::raw(xv.shape().to_vec(), dx));
                acc(*kernel, Array::raw(kv.shape().to_vec(), dk));
                acc(*bias, Array::raw(self.value(*bias).shape().to_vec(), db));
            }
            Op::Conv2d { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (h, w) = (xv.shape()[0], xv.shape()[1]);
                let (kh, kw, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let (hh, hw) = (kh / 2, kw / 2);
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                let mut dx = vec![0.0; h * w];
                let mut dk = vec![0.0; kh * kw * c_out];
                let mut db = vec![0.0; c_out];
                for grow in gd.chunks(c_out) {
                    for (d, v) in db.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                for i in 0..h {
                    for a in 0..kh {
                        let Some(si) = (i + a).checked_sub(hh).filter(|&s| s < h) else {
                            continue;
                        };
                        for j in 0..w {
                            let grow = &gd[(i * w + j) * c_out..(i * w + j + 1) * c_out];
                            for b in 0..kw {
                                let Some(sj) = (j + b).checked_sub(hw).filter(|&s| s < w) else {
                                    continue;
                                };
                                let tap = (a * kw + b) * c_out;
                                let taps = &kd[tap..tap + c_out];
                                dx[si * w + sj] += taps.iter().zip(grow).map(|(k, gi)| k * gi).sum::<f64>();
                                let xval = xd[si * w + sj];
                                for (d, gi) in dk[tap..tap + c_out].iter_mut().zip(grow) {
                                    *d += xval * gi;
                                }
                            }
                        }
                    }
                }
                acc(*x, Array::raw(xv.shape().to_vec(), dx));
                acc(*kernel, Array::raw(kv.shape().to_vec(), dk));
                acc(*bias, Array::raw(self.value(*bias).shape().to_vec(), db));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Array::raw(shape, g.data().to_vec()));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(*x, Array::raw(vec![m, n], dx));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(m * n);
                    for r in 0..m {
                        dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + n]);
                    }
                    acc(p, Array::raw(vec![m, n], dp));
                    offset += n;
                }
            }
            Op::RowDiff(x) => {
                let xv = self.value(*x);
                let n = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    dx[i + n] += gi;
                    dx[i] -= gi;
                }
                acc(*x, Array::raw(xv.shape().to_vec(), dx));
            }
            Op::Gather { x, indices } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (&i, &gi) in indices.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                acc(*x, Array::raw(xv.shape().to_vec(), dx));
            }
            Op::Bce { s, target, eps } => {
                let grad = zip(g, self.value(*s), |gi, p| gi * bce_grad(p, *target, *eps));
                acc(*s, grad);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Array::filled(&shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Array::filled(xv.shape(), g.data()[0] / xv.len() as f64));
            }
            Op::Variance(x) => {
                let xv = self.value(*x);
                let n = xv.len() as f64;
                let c = xv.sum() / n;
                let g0 = g.data()[0];
                acc(*x, xv.map(|v| g0 * 2.0 * (v - c) / n));
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape()))
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / scale).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn bce(p: f64, target: f64, eps: f64) -> f64 {
    let c = p.clamp(eps, 1.0 - eps);
    -(target * c.ln() + (1.0 - target) * (1.0 - c).ln())
}

fn bce_grad(p: f64, target: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        return 0.0;
    }
    -target / p + (1.0 - target) / (1.0 - p)
}

pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let c = xs.iter().sum::<f64>() / n;
    xs.iter().map(|v| (v - c) * (v - c)).sum::<f64>() / n
}
