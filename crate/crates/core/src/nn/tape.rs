//! Reverse-mode differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order of the computation graph and backward is a single reverse sweep.
//! Gradients are only formed for nodes that depend on a parameter leaf.

use super::tensor::{gemm, Mat, Tensor};
use crate::envs::synthetic_mp::gelu;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Gelu => gelu(x),
        }
    }

    /// Derivative from the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => (x > 0.0) as u8 as f64,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Softmax(Var),
    SliceLast { a: Var, start: usize },
    ConcatLast(Vec<Var>),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a [..., k] x b [k, n]`, batching over every leading axis of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().is_empty() || tb.shape().len() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = Tensor::zeros(&with_last(ta.shape(), n));
        gemm(
            m,
            k,
            n,
            Mat::row_major(ta.data(), k),
            Mat::row_major(tb.data(), n),
            out.data_mut(),
            false,
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `a [B, T, k]` with `b [B, k, S]`, or with
    /// `b [B, S, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.shape().len() == 3
            && tb.shape().len() == 3
            && ta.shape()[0] == tb.shape()[0]
            && ta.shape()[2] == if trans_b { tb.shape()[2] } else { tb.shape()[1] };
        if !ok {
            return Err(shape_err(
                "bmm",
                format!("{:?} x {:?} (trans_b = {trans_b})", ta.shape(), tb.shape()),
            ));
        }
        let (bs, t, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let s = if trans_b { tb.shape()[1] } else { tb.shape()[2] };
        let mut out = Tensor::zeros(&[bs, t, s]);
        for i in 0..bs {
            let a_i = &ta.data()[i * t * k..(i + 1) * t * k];
            let b_i = &tb.data()[i * s * k..(i + 1) * s * k];
            let bview = if trans_b {
                Mat::transposed(b_i, k)
            } else {
                Mat::row_major(b_i, s)
            };
            gemm(
                t,
                k,
                s,
                Mat::row_major(a_i, k),
                bview,
                &mut out.data_mut()[i * t * s..(i + 1) * t * s],
                false,
            );
        }
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || tb.numel() != ta.last_dim() {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        let n = tb.numel();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[k % n];
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales row `r` of `a [..., n]` by `c[r]`, where `c` is `[..., 1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.last_dim() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err(
                "mul_col",
                format!("{:?} * {:?}", ta.shape(), tc.shape()),
            ));
        }
        let n = ta.last_dim();
        let mut out = ta.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let f = tc.data()[r];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::MulCol(a, c), &[a, c]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let out = self.value(a).map(|v| f.apply(v));
        self.push(out, Op::Act(a, f), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.act(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.act(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.act(a, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.act(a, Activation::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.last_dim();
        if start + len > n || ta.shape().is_empty() {
            return Err(shape_err(
                "slice_last",
                format!("{start}..{} of {:?}", start + len, ta.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for row in ta.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(with_last(ta.shape(), len), data)?;
        Ok(self.push(out, Op::SliceLast { a, start }, &[a]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or(Error::Empty("concat_last"))?)
            .clone();
        let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || &t.shape()[..t.shape().len() - 1] != lead {
                return Err(shape_err("concat_last", format!("{:?} vs {:?}", t.shape(), first.shape())));
            }
            total += t.last_dim();
        }
        let rows = first.rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(with_last(first.shape(), total), data)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let data: Vec<f64> = t
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let out = Tensor::new(with_last(t.shape(), 1), data).expect("row count matches");
        self.push(out, Op::MeanLast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.shape());
                    gemm(
                        m,
                        n,
                        k,
                        Mat::row_major(g.data(), n),
                        Mat::transposed(tb.data(), n),
                        da.data_mut(),
                        false,
                    );
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.shape());
                    gemm(
                        k,
                        m,
                        n,
                        Mat::transposed(ta.data(), k),
                        Mat::row_major(g.data(), n),
                        db.data_mut(),
                        false,
                    );
                    acc(*b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, t, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let s = y.shape()[2];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(ta.shape());
                    for i in 0..bs {
                        let g_i = &g.data()[i * t * s..(i + 1) * t * s];
                        let b_i = &tb.data()[i * s * k..(i + 1) * s * k];
                        // dA = dC B (trans) or dC B^T
                        let bview = if *trans_b {
                            Mat::row_major(b_i, k)
                        } else {
                            Mat::transposed(b_i, s)
                        };
                        gemm(
                            t,
                            s,
                            k,
                            Mat::row_major(g_i, s),
                            bview,
                            &mut da.data_mut()[i * t * k..(i + 1) * t * k],
                            false,
                        );
                    }
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(tb.shape());
                    for i in 0..bs {
                        let g_i = &g.data()[i * t * s..(i + 1) * t * s];
                        let a_i = &ta.data()[i * t * k..(i + 1) * t * k];
                        let out = &mut db.data_mut()[i * s * k..(i + 1) * s * k];
                        if *trans_b {
                            // dB [S, k] = dC^T A
                            gemm(s, t, k, Mat::transposed(g_i, s), Mat::row_major(a_i, k), out, false);
                        } else {
                            // dB [k, S] = A^T dC
                            gemm(k, t, s, Mat::transposed(a_i, k), Mat::row_major(g_i, s), out, false);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*bias) {
                    let n = g.last_dim();
                    let mut db = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*bias, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.zip_map(tb, "mul", |x, y| x * y).expect("same shape"));
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(ta, "mul", |x, y| x * y).expect("same shape"));
                }
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                let n = ta.last_dim();
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (r, chunk) in da.data_mut().chunks_mut(n).enumerate() {
                        let f = tc.data()[r];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    acc(*a, da);
                }
                if self.needs(*c) {
                    let mut dc = Tensor::zeros(tc.shape());
                    for (r, d) in dc.data_mut().iter_mut().enumerate() {
                        *d = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                    }
                    acc(*c, dc);
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Act(a, f) => {
                let x = self.value(*a);
                let mut da = g.clone();
                for ((d, &xv), &yv) in da.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                    *d *= f.derivative(xv, yv);
                }
                acc(*a, da);
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut da = g.clone();
                for (r, row) in da.data_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(r);
                    let dot: f64 = row.iter().zip(yr).map(|(d, p)| d * p).sum();
                    row.iter_mut().zip(yr).for_each(|(d, p)| *d = p * (*d - dot));
                }
                acc(*a, da);
            }
            Op::SliceLast { a, start } => {
                let ta = self.value(*a);
                let (n, len) = (ta.last_dim(), g.last_dim());
                let mut da = Tensor::zeros(ta.shape());
                for (r, row) in da.data_mut().chunks_mut(n).enumerate() {
                    row[*start..start + len].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::ConcatLast(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let len = tp.last_dim();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(tp.shape());
                        for (r, row) in dp.data_mut().chunks_mut(len).enumerate() {
                            row.copy_from_slice(&g.row(r)[offset..offset + len]);
                        }
                        acc(p, dp);
                    }
                    offset += len;
                }
            }
            Op::Square(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, "square", |d, v| 2.0 * v * d).expect("same shape"));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, "abs", |d, v| d * v.signum() * (v != 0.0) as u8 as f64).expect("same shape"));
            }
            Op::Sqrt(a) => {
                acc(*a, g.zip_map(y, "sqrt", |d, r| d * 0.5 / r).expect("same shape"));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::full(x.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::full(x.shape(), g.data()[0] / x.numel().max(1) as f64));
            }
            Op::MeanLast(a) => {
                let x = self.value(*a);
                let n = x.last_dim();
                let mut da = Tensor::zeros(x.shape());
                for (r, row) in da.data_mut().chunks_mut(n).enumerate() {
                    let v = g.data()[r] / n as f64;
                    row.iter_mut().for_each(|d| *d = v);
                }
                acc(*a, da);
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                acc(*a, g.reshape(x.shape()).expect("same numel"));
            }
        }
    }
}

/// Gradients indexed by tape variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, zeros shaped like `like` when `v` does not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Norm-wise relative error `max|a - n| / max(max|a|, max|n|, 1e-6)`
    /// between analytic and central-difference gradients of `build` with
    /// respect to every input. The floor keeps gradients that vanish
    /// identically (a key bias under softmax) from dividing noise by noise.
    pub fn gradient_error<F>(inputs: &[Tensor], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let h = 1e-5;
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
            let l = build(&mut t, &vs).unwrap();
            t.value(l).item().unwrap()
        };
        let mut worst = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input);
            let mut numeric = Tensor::zeros(input.shape());
            for k in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[k] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[k] -= h;
                numeric.data_mut()[k] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let diff = analytic
                .data()
                .iter()
                .zip(numeric.data())
                .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
            let scale = analytic.max_abs().max(numeric.max_abs());
            worst = worst.max(diff / scale.max(1e-6));
        }
        worst
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let w = tape.param(Tensor::zeros(&[3, 2]));
        let xv = tape.constant(x);
        let y = tape.matmul(xv, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(g.get(xv).is_none());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[2, 2], 3.0));
        let zero = tape.scale(w, 0.0);
        let l = tape.sum(zero);
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 0.0));
        let c = tape.constant(Tensor::scalar(1.0));
        let g = tape.backward(c).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut r = rng();
        // keep kinked primitives away from their kinks
        let away = |t: Tensor| t.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        let a23 = random_tensor(&[2, 3], &mut r);
        let b34 = random_tensor(&[3, 4], &mut r);
        let w = random_tensor(&[2, 3, 4], &mut r);
        let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>)> = vec![
            ("matmul", vec![a23.clone(), b34.clone()], Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y2 = t.square(y);
                Ok(t.sum(y2))
            })),
            ("matmul3", vec![random_tensor(&[2, 2, 3], &mut r), b34.clone()], Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            })),
            ("bmm", vec![random_tensor(&[2, 3, 4], &mut r), w.clone()], Box::new(|t, v| {
                let y = t.bmm(v[0], v[1], true)?;
                let y = t.square(y);
                Ok(t.mean(y))
            })),
            ("bmm_plain", vec![random_tensor(&[2, 3, 4], &mut r), random_tensor(&[2, 4, 5], &mut r)], Box::new(|t, v| {
                let y = t.bmm(v[0], v[1], false)?;
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            })),
            ("bias", vec![a23.clone(), random_tensor(&[3], &mut r)], Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            })),
            ("add_sub_mul", vec![a23.clone(), random_tensor(&[2, 3], &mut r)], Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let p = t.mul(s, d)?;
                let p = t.scale(p, 1.7);
                Ok(t.sum(p))
            })),
            ("mul_col", vec![a23.clone(), random_tensor(&[2, 1], &mut r)], Box::new(|t, v| {
                let y = t.mul_col(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            })),
            ("gelu", vec![a23.clone()], Box::new(|t, v| {
                let y = t.gelu(v[0]);
                Ok(t.sum(y))
            })),
            ("relu", vec![away(a23.clone())], Box::new(|t, v| {
                let y = t.relu(v[0]);
                let y = t.square(y);
                Ok(t.sum(y))
            })),
            ("softmax", vec![random_tensor(&[2, 2, 4], &mut r), random_tensor(&[2, 2, 4], &mut r)], Box::new(|t, v| {
                let y = t.softmax(v[0]);
                let p = t.mul(y, v[1])?;
                Ok(t.sum(p))
            })),
            ("slice_concat", vec![a23.clone(), random_tensor(&[2, 2], &mut r)], Box::new(|t, v| {
                let s = t.slice_last(v[0], 1, 2)?;
                let c = t.concat_last(&[s, v[1], v[0]])?;
                let c = t.square(c);
                let c = t.tanh(c);
                Ok(t.sum(c))
            })),
            ("abs_sqrt", vec![away(a23.clone())], Box::new(|t, v| {
                let y = t.abs(v[0]);
                let y = t.add_scalar(y, 0.5);
                let y = t.sqrt(y);
                Ok(t.sum(y))
            })),
            ("mean_last_reshape", vec![random_tensor(&[2, 3, 2], &mut r)], Box::new(|t, v| {
                let y = t.reshape(v[0], &[6, 2])?;
                let y = t.square(y);
                let m = t.mean_last(y);
                let m = t.sqrt(m);
                Ok(t.mean(m))
            })),
        ];
        for (name, inputs, build) in cases {
            let err = gradient_error(&inputs, |t, v| build(t, v));
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn two_layer_tanh_mlp_gradients() {
        let mut r = rng();
        let inputs = vec![
            random_tensor(&[5, 4], &mut r),
            random_tensor(&[4, 6], &mut r),
            random_tensor(&[6], &mut r),
            random_tensor(&[6, 3], &mut r),
            random_tensor(&[3], &mut r),
        ];
        let err = gradient_error(&inputs, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.tanh(h);
            let y = t.matmul(h, v[3])?;
            let y = t.add_bias(y, v[4])?;
            let y = t.square(y);
            Ok(t.mean(y))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.bmm(a, b, true).is_err());
        assert!(tape.slice_last(a, 2, 2).is_err());
        assert!(tape.concat_last(&[]).is_err());
        let c = tape.param(Tensor::zeros(&[3, 1]));
        assert!(tape.mul_col(a, c).is_err());
    }
}
