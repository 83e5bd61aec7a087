//! Reverse-mode differentiation over a linear record of primitive ops.

use std::collections::BTreeMap;

use super::kernels::{axpy, dot, gemm, Layout};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MulRows(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
        scale: f64,
    },
    Sum(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Mse(Var, Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Attention {
        qkv: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run gradient tape. One tape records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for a parameter; exact zeros when the loss does not reach it.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Gradient for an input created with [`Tape::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free input whose gradient is reported in [`Gradients::input`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !is_matrix(av) || !is_matrix(bv) || av.cols() != bv.rows() {
            return Err(Error::dim(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` with `w: [in, out]` and optional bias of length `out`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) {
            return Err(Error::dim("transpose expects a matrix"));
        }
        let out = xv.transpose();
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if !is_matrix(xv) || !is_matrix(wv) || xv.cols() != wv.rows() {
            return Err(Error::dim(format!(
                "linear {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), Layout::N, wv.data(), Layout::N, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::dim(format!("linear bias {:?} for width {n}", bv.shape())));
            }
            for row in out.chunks_mut(n) {
                axpy(1.0, bv.data(), row);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::Linear { x, w, b }, ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_raw(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds `b` tiled down the rows of `x`: row `i` receives `b[i % rows(b)]`.
    /// Covers bias rows (`b: [n]`) and per-position tables (`b: [t, n]`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (rb, n) = (bv.rows(), bv.cols());
        if !is_matrix(xv) || xv.cols() != n || xv.rows() % rb != 0 {
            return Err(Error::dim(format!(
                "add_broadcast {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            axpy(1.0, bv.row(i % rb), row);
        }
        let ng = self.ng(x) || self.ng(b);
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::AddBroadcast(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_raw(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_raw(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect());
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Element-wise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(Error::dim(format!("mul_const {:?} by {}", xv.shape(), c.len())));
        }
        let data = xv.data().iter().zip(c).map(|(a, b)| a * b).collect();
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst(x, c.to_vec()), ng))
    }

    /// Scales each row of `x` by a constant factor (row masks use 0/1).
    pub fn mul_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) || xv.rows() != factors.len() {
            return Err(Error::dim(format!(
                "mul_rows {:?} by {} factors",
                xv.shape(),
                factors.len()
            )));
        }
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &f) in out.chunks_mut(n).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulRows(x, factors.to_vec()), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if !is_matrix(xv) || self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(format!("layer_norm width {n}")));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let m = xv.rows();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let out = Tensor::from_raw(vec![m, n], out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_raw(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect());
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Square root of a nonnegative input; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, Op::Sqrt(x), |v| v.max(0.0).sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) {
            return Err(Error::dim("softmax_rows expects a matrix"));
        }
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftmaxRows(x), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) {
            return Err(Error::dim("log_softmax_rows expects a matrix"));
        }
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), ng))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat needs inputs and axis 0 or 1"));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        if vals.iter().any(|t| !is_matrix(t)) {
            return Err(Error::dim("concat expects matrices"));
        }
        let out = if axis == 0 {
            let n = vals[0].cols();
            if vals.iter().any(|t| t.cols() != n) {
                return Err(Error::dim("concat axis 0: column counts differ"));
            }
            let m: usize = vals.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(m * n);
            for t in &vals {
                data.extend_from_slice(t.data());
            }
            Tensor::from_raw(vec![m, n], data)
        } else {
            let m = vals[0].rows();
            if vals.iter().any(|t| t.rows() != m) {
                return Err(Error::dim("concat axis 1: row counts differ"));
            }
            let n: usize = vals.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for t in &vals {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::from_raw(vec![m, n], data)
        };
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) || axis > 1 {
            return Err(Error::dim("axis reduction expects a matrix and axis 0 or 1"));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let count = if axis == 0 { m } else { n };
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let out = if axis == 0 {
            let mut acc = vec![0.0; n];
            for r in 0..m {
                axpy(1.0, xv.row(r), &mut acc);
            }
            acc.iter_mut().for_each(|v| *v *= scale);
            Tensor::from_raw(vec![1, n], acc)
        } else {
            let data = (0..m).map(|r| xv.row(r).iter().sum::<f64>() * scale).collect();
            Tensor::from_raw(vec![m, 1], data)
        };
        let ng = self.ng(x);
        Ok(self.push(out, Op::SumAxis { x, axis, scale }, ng))
    }

    /// Mean along an axis; the reduced axis keeps extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Replaces entries where `mask` is set with the finite constant `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != mask.len() {
            return Err(Error::dim(format!("masked_fill {:?} with mask {}", xv.shape(), mask.len())));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("masked_fill value".into()));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mse")?;
        let n = av.len() as f64;
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if !is_matrix(xv) || idx.is_empty() {
            return Err(Error::dim("gather_rows expects a matrix and indices"));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::dim(format!("gather_rows index {i} out of {m}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::from_raw(vec![idx.len(), n], data);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Multi-head scaled dot-product attention over `groups` independent
    /// sequences stacked row-wise.
    ///
    /// `qkv` has shape `[groups * t, 3 * d]` with query, key and value
    /// column blocks in that order; head `h` uses columns `h*d/heads..`.
    /// Keys whose `key_mask` entry is false get exactly zero probability.
    /// Returns `[groups * t, d]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        groups: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xv = self.value(qkv);
        let (rows, cols) = (xv.rows(), xv.cols());
        if !is_matrix(xv) || groups == 0 || rows % groups != 0 || cols % 3 != 0 {
            return Err(Error::dim(format!("attention input {:?}", xv.shape())));
        }
        let d = cols / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(Error::dim("attention key mask length"));
            }
        }
        let t = rows / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = xv.data();
        let mut probs = vec![0.0; groups * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for g in 0..groups {
            let valid: Vec<usize> = (0..t)
                .filter(|&j| key_mask.map(|m| m[g * t + j]).unwrap_or(true))
                .collect();
            if valid.is_empty() {
                return Err(Error::contract(format!("attention group {g} has no valid keys")));
            }
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                for i in 0..t {
                    let qi = &x[(g * t + i) * cols + qo..][..dh];
                    let p = &mut probs[((g * heads + h) * t + i) * t..][..t];
                    let mut mx = f64::NEG_INFINITY;
                    for &j in &valid {
                        let kj = &x[(g * t + j) * cols + ko..][..dh];
                        let s = dot(qi, kj) * scale;
                        p[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for &j in &valid {
                        p[j] = (p[j] - mx).exp();
                        z += p[j];
                    }
                    let o = &mut out[(g * t + i) * d + h * dh..][..dh];
                    for &j in &valid {
                        p[j] /= z;
                        let vj = &x[(g * t + j) * cols + vo..][..dh];
                        axpy(p[j], vj, o);
                    }
                }
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            Tensor::from_raw(vec![rows, d], out),
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities saved by [`Tape::attention`], laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut params: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let mut inputs = BTreeMap::new();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    inputs.insert(Var(i), Tensor::from_raw(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => {
                    let slot = params
                        .get_mut(id.0)
                        .ok_or_else(|| Error::contract("parameter from a different store"))?;
                    axpy(1.0, &g, slot.data_mut());
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        Ok(Gradients { params, inputs })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |ga| gemm(m, n, k, g, Layout::N, bv.data(), Layout::T, 1.0, ga));
                self.acc(grads, *b, |gb| gemm(k, m, n, av.data(), Layout::T, g, Layout::N, 1.0, gb));
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                self.acc(grads, *x, |gx| gemm(m, n, k, g, Layout::N, wv.data(), Layout::T, 1.0, gx));
                self.acc(grads, *w, |gw| gemm(k, m, n, xv.data(), Layout::T, g, Layout::N, 1.0, gw));
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for row in g.chunks(n) {
                            axpy(1.0, row, gb);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(1.0, g, ga));
                self.acc(grads, *b, |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(1.0, g, ga));
                self.acc(grads, *b, |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((s, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((s, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                self.acc(grads, *x, |gx| axpy(1.0, g, gx));
                let bv = self.value(*b);
                let (rb, n) = (bv.rows(), bv.cols());
                self.acc(grads, *b, |gb| {
                    for (r, row) in g.chunks(n).enumerate() {
                        axpy(1.0, row, &mut gb[(r % rb) * n..][..n]);
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| axpy(*c, g, gx)),
            Op::AddScalar(x) => self.acc(grads, *x, |gx| axpy(1.0, g, gx)),
            Op::MulConst(x, c) => self.acc(grads, *x, |gx| {
                for ((s, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                    *s += gi * ci;
                }
            }),
            Op::MulRows(x, f) => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((srow, grow), fi) in gx.chunks_mut(n).zip(g.chunks(n)).zip(f) {
                        axpy(*fi, grow, srow);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for grow in g.chunks(n) {
                        axpy(1.0, grow, gb);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = grow[c] * gam[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dh, hrow) / n as f64;
                        let out = &mut gx[r * n..][..n];
                        for c in 0..n {
                            out[c] += rstd[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((s, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        *s += gi * (cdf + v * pdf);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((s, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Sqrt(x) => self.acc(grads, *x, |gx| {
                for ((s, gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    if yi > 0.0 {
                        *s += gi * 0.5 / yi;
                    }
                }
            }),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((s, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *s += 2.0 * gi * v;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((srow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let inner = dot(grow, yrow);
                        for c in 0..n {
                            srow[c] += yrow[c] * (grow[c] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for ((srow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for c in 0..n {
                            srow[c] += grow[c] - yrow[c].exp() * total;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let n = node.value.cols();
                if *axis == 0 {
                    let mut off = 0;
                    for &v in inputs {
                        let len = self.value(v).len();
                        self.acc(grads, v, |gv| axpy(1.0, &g[off..off + len], gv));
                        off += len;
                    }
                } else {
                    let mut col = 0;
                    for &v in inputs {
                        let w = self.value(v).cols();
                        self.acc(grads, v, |gv| {
                            for (r, grow) in g.chunks(n).enumerate() {
                                axpy(1.0, &grow[col..col + w], &mut gv[r * w..][..w]);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::SumAxis { x, axis, scale } => {
                let xv = self.value(*x);
                let n = xv.cols();
                self.acc(grads, *x, |gx| {
                    for (r, row) in gx.chunks_mut(n).enumerate() {
                        if *axis == 0 {
                            axpy(*scale, g, row);
                        } else {
                            row.iter_mut().for_each(|v| *v += scale * g[r]);
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::MaskedFill { x, mask } => self.acc(grads, *x, |gx| {
                for ((s, gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *s += gi;
                    }
                }
            }),
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / av.len() as f64;
                self.acc(grads, *a, |ga| {
                    for ((s, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *s += c * (x - y);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((s, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *s -= c * (x - y);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (grow, &r) in g.chunks(n).zip(idx) {
                        axpy(1.0, grow, &mut gx[r * n..][..n]);
                    }
                });
            }
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            } => {
                let xv = self.value(*qkv);
                let x = xv.data();
                let cols = xv.cols();
                let d = cols / 3;
                let t = xv.rows() / groups;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                self.acc(grads, *qkv, |gx| {
                    let mut dp = vec![0.0; t];
                    for gi in 0..*groups {
                        for h in 0..*heads {
                            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                            for i in 0..t {
                                let p = &probs[((gi * heads + h) * t + i) * t..][..t];
                                let go = &g[(gi * t + i) * d + h * dh..][..dh];
                                let mut inner = 0.0;
                                for j in 0..t {
                                    if p[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let vj = &x[(gi * t + j) * cols + vo..][..dh];
                                    dp[j] = dot(go, vj);
                                    inner += p[j] * dp[j];
                                    axpy(p[j], go, &mut gx[(gi * t + j) * cols + vo..][..dh]);
                                }
                                for j in 0..t {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - inner) * scale;
                                    let (qrow, krow) = ((gi * t + i) * cols, (gi * t + j) * cols);
                                    for c in 0..dh {
                                        gx[qrow + qo + c] += ds * x[krow + ko + c];
                                        gx[krow + ko + c] += ds * x[qrow + qo + c];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
