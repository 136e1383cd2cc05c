//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Nodes are
//! created in topological order, so `backward` is a single reverse sweep over
//! the tape; each node's gradient is complete by the time it is visited, and
//! contributions from several consumers are summed.

use crate::error::{shape_err, Error, Result};

use super::conv::ConvGeom;
use super::resize::{bilinear, bilinear_backward};
use super::scalar::{gemm, Layout};
use super::{Scalar, Tensor};

/// Clamping bound for probabilities that are fed into logarithms.
pub const LOG_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    OneMinus,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which operand (if any) is repeated. The small operand is either a single
/// element or a trailing-dimension suffix of the other, so element `i` of the
/// output reads element `i % len` of it.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Lhs(usize),
    Rhs(usize),
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Affine { input: Var, weight: Var, bias: Option<Var>, rows: usize, dim_in: usize, dim_out: usize },
    Binary { kind: Binary, lhs: Var, rhs: Var, bcast: Broadcast },
    Unary { kind: Unary, input: Var },
    Scale { input: Var, factor: F },
    Clamp { input: Var, lo: F, hi: F },
    Softmax { input: Var },
    LogSoftmax { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    SumLast { input: Var },
    Reshape { input: Var },
    Expand { input: Var, dim: usize, times: usize },
    Narrow { input: Var, start: usize, len: usize },
    Gather { table: Var, ids: Vec<usize> },
    Pick { input: Var, ids: Vec<usize> },
    Resize { input: Var, planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, normalized: Vec<F>, inv_std: Vec<F>, batch_stats: bool },
}

/// Per-channel statistics seen by a training-mode [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Records operations for one forward pass; owns all intermediate values.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    eval_mode: bool,
    batch_stats: Vec<BatchStats<F>>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), eval_mode: false, batch_stats: Vec::new() }
    }

    /// In eval mode [`Tape::batch_norm`] uses running statistics.
    pub fn set_eval(&mut self, eval: bool) {
        self.eval_mode = eval;
    }

    pub fn is_eval(&self) -> bool {
        self.eval_mode
    }

    /// Statistics recorded by training-mode batch normalization, in call order.
    pub fn batch_stats(&self) -> &[BatchStats<F>] {
        &self.batch_stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `x` into a new constant; no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<F> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`; `None` if `x` was not
    /// reached from the loss.
    pub fn grad(&self, x: Var) -> Option<&[F]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, x: Var) -> Option<Tensor<F>> {
        let g = self.grad(x)?.to_vec();
        Some(Tensor::new(self.shape(x).to_vec(), g).expect("gradient shape matches value"))
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, x: Var) -> &[F] {
        self.nodes[x.0].value.data()
    }

    // ---- forward operations ----

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding, dilation)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_ch] {
                return shape_err(format!("conv2d bias {:?} does not match {} filters", self.shape(b), geom.out_ch));
            }
        }
        let out = geom.forward(self.data(input), self.data(kernel), bias.map(|b| self.data(b)));
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, &inputs))
    }

    /// `input[..., D] x weight[D, E] + bias[E]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        if w_shape.len() != 2 || in_shape.is_empty() || last_dim(&in_shape) != w_shape[0] {
            return shape_err(format!("affine: input {in_shape:?} is incompatible with weight {w_shape:?}"));
        }
        let (dim_in, dim_out) = (w_shape[0], w_shape[1]);
        if let Some(b) = bias {
            if self.shape(b) != [dim_out] {
                return shape_err(format!("affine: bias {:?} does not match output width {dim_out}", self.shape(b)));
            }
        }
        let rows = self.value(input).numel() / dim_in;
        let mut out = vec![F::zero(); rows * dim_out];
        if let Some(b) = bias {
            for row in out.chunks_mut(dim_out) {
                row.copy_from_slice(self.data(b));
            }
        }
        gemm(
            self.data(input),
            Layout::row_major(rows, dim_in),
            self.data(weight),
            Layout::row_major(dim_in, dim_out),
            F::one(),
            &mut out,
            Layout::row_major(rows, dim_out),
        );
        let mut shape = in_shape;
        *shape.last_mut().unwrap() = dim_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Affine { input, weight, bias, rows, dim_in, dim_out }, &inputs))
    }

    pub fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let (ls, rs) = (self.shape(lhs), self.shape(rhs));
        let (ln, rn) = (self.value(lhs).numel(), self.value(rhs).numel());
        let (bcast, shape) = if ls == rs {
            (Broadcast::Same, ls.to_vec())
        } else if rn == 1 || ls.ends_with(rs) {
            (Broadcast::Rhs(rn), ls.to_vec())
        } else if ln == 1 || rs.ends_with(ls) {
            (Broadcast::Lhs(ln), rs.to_vec())
        } else {
            return shape_err(format!("{kind:?}: shapes {ls:?} and {rs:?} do not broadcast"));
        };
        let (a, b) = (self.data(lhs), self.data(rhs));
        let numel = a.len().max(b.len());
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<F> = match bcast {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs(n) => (0..numel).map(|i| f(a[i], b[i % n])).collect(),
            Broadcast::Lhs(n) => (0..numel).map(|i| f(a[i % n], b[i])).collect(),
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Binary { kind, lhs, rhs, bcast }, &[lhs, rhs]))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Mul, lhs, rhs)
    }

    pub fn unary(&mut self, kind: Unary, input: Var) -> Result<Var> {
        let x = self.value(input);
        let eps = F::lit(LOG_EPS);
        let value = match kind {
            Unary::Sigmoid => x.map(|v| {
                let s = if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                };
                s.max(eps).min(F::one() - eps)
            }),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Relu => x.map(|v| v.max(F::zero())),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|v| !(**v > F::zero()) || !v.is_finite()) {
                    return Err(Error::Domain(format!("log of non-positive or non-finite value {bad}; clamp first")));
                }
                x.map(|v| v.ln())
            }
            Unary::Exp => x.map(|v| v.exp()),
            Unary::OneMinus => x.map(|v| F::one() - v),
            Unary::Neg => x.map(|v| -v),
        };
        Ok(self.push(value, Op::Unary { kind, input }, &[input]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::OneMinus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn clamp(&mut self, input: Var, lo: F, hi: F) -> Var {
        let value = self.value(input).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { input, lo, hi }, &[input])
    }

    /// `log(clamp(x, eps, 1 - eps))`, the only log form used by the losses.
    pub fn safe_log(&mut self, x: Var) -> Result<Var> {
        let eps = F::lit(LOG_EPS);
        let c = self.clamp(x, eps, F::one() - eps);
        self.log(c)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if !x.all_finite() {
            return Err(Error::Domain("softmax of non-finite input".into()));
        }
        let k = last_dim(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { input }, &[input]))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if !x.all_finite() {
            return Err(Error::Domain("log_softmax of non-finite input".into()));
        }
        let k = last_dim(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { input }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.data(input);
        let m = x.iter().copied().sum::<F>() / F::lit(x.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { input }, &[input])
    }

    /// Sums out the last dimension.
    pub fn sum_last(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = last_dim(&shape);
        let out: Vec<F> = self.data(input).chunks(k).map(|r| r.iter().copied().sum()).collect();
        let value = Tensor::new(shape[..shape.len().saturating_sub(1)].to_vec(), out)?;
        Ok(self.push(value, Op::SumLast { input }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Repeats a unit-extent dimension `times` times.
    pub fn expand(&mut self, input: Var, dim: usize, times: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if dim >= shape.len() || shape[dim] != 1 || times == 0 {
            return shape_err(format!("expand: dimension {dim} of {shape:?} must have extent 1"));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let x = self.data(input);
        let mut out = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            let src = &x[o * inner..(o + 1) * inner];
            for _ in 0..times {
                out.extend_from_slice(src);
            }
        }
        let mut new_shape = shape;
        new_shape[dim] = times;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Expand { input, dim, times }, &[input]))
    }

    /// Slice `[start, start + len)` of the last dimension.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let k = last_dim(&shape);
        if shape.is_empty() || len == 0 || start + len > k {
            return shape_err(format!("narrow: [{start}, {}) out of range for {shape:?}", start + len));
        }
        let out: Vec<F> = self.data(input).chunks(k).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Narrow { input, start, len }, &[input]))
    }

    /// Row lookup: `table[M, E]` indexed by `ids` gives `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return shape_err(format!("gather_rows: table {shape:?} with {} ids", ids.len()));
        }
        let (m, e) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Invalid(format!("gather_rows: id {bad} out of range for {m} rows")));
        }
        let x = self.data(table);
        let out: Vec<F> = ids.iter().flat_map(|&i| x[i * e..(i + 1) * e].iter().copied()).collect();
        let value = Tensor::new([ids.len(), e], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Selects `x[n, ids[n]]` from a `[N, M]` tensor.
    pub fn pick(&mut self, input: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || shape[0] != ids.len() {
            return shape_err(format!("pick: input {shape:?} with {} ids", ids.len()));
        }
        let m = shape[1];
        if let Some(bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::Invalid(format!("pick: id {bad} out of range for {m} columns")));
        }
        let x = self.data(input);
        let out: Vec<F> = ids.iter().enumerate().map(|(n, &i)| x[n * m + i]).collect();
        let value = Tensor::new([ids.len()], out)?;
        Ok(self.push(value, Op::Pick { input, ids: ids.to_vec() }, &[input]))
    }

    /// Bilinear resampling of the two trailing (spatial) dimensions.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return shape_err(format!("bilinear_resize: input {shape:?} to {out_h}x{out_w}"));
        }
        let (in_h, in_w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let out = bilinear(self.data(input), planes, in_h, in_w, out_h, out_w);
        let mut new_shape = shape[..shape.len() - 2].to_vec();
        new_shape.extend([out_h, out_w]);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Resize { input, planes, in_h, in_w, out_h, out_w }, &[input]))
    }

    /// Per-channel normalization of `[N, C, H, W]` followed by `gamma x + beta`.
    /// Training mode normalizes with the batch statistics and records them
    /// under `name`; eval mode uses `running = (mean, var)`.
    pub fn batch_norm(&mut self, name: &str, input: Var, gamma: Var, beta: Var, running: (&[F], &[F]), eps: F) -> Result<Var> {
        let [n, c, h, w] = *self.shape(input) else {
            return shape_err(format!("batch_norm expects [N, C, H, W], got {:?}", self.shape(input)));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.0.len() != c || running.1.len() != c {
            return shape_err(format!("batch_norm over {c} channels with mismatched parameters"));
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.data(input);
        let batch_stats = !self.eval_mode;
        let (mean, var) = if batch_stats {
            let mut mean = vec![F::zero(); c];
            let mut var = vec![F::zero(); c];
            for ch in 0..c {
                let values = (0..n).flat_map(|b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
                let m = values.clone().fold(F::zero(), |a, &v| a + v) / F::lit(count as f64);
                mean[ch] = m;
                var[ch] = values.fold(F::zero(), |a, &v| a + (v - m) * (v - m)) / F::lit(count as f64);
            }
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut normalized = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for (i, &v) in x.iter().enumerate() {
            let ch = (i / plane) % c;
            normalized[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * normalized[i] + b[ch];
        }
        if batch_stats {
            let unbias = if count > 1 { F::lit(count as f64 / (count - 1) as f64) } else { F::one() };
            let var = var.iter().map(|&v| v * unbias).collect();
            self.batch_stats.push(BatchStats { name: name.to_string(), mean, var });
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, normalized, inv_std, batch_stats }, &[input, gamma, beta]))
    }

    // ---- reverse sweep ----

    /// Populates gradients of the scalar `loss` on every reachable node that
    /// requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[idx].grad.take() else { continue };
            let contributions = self.local_grads(idx, &grad);
            self.nodes[idx].grad = Some(grad);
            for (var, g) in contributions {
                self.accumulate(var, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, g: Vec<F>) {
        let node = &mut self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let want = [self.wants(*input), self.wants(*kernel), bias.is_some_and(|b| self.wants(b))];
                let (di, dk, db) = geom.backward(self.data(*input), self.data(*kernel), g, want);
                out.extend(di.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, db) {
                    out.push((*b, d));
                }
            }
            Op::Affine { input, weight, bias, rows, dim_in, dim_out } => {
                let (rows, d, e) = (*rows, *dim_in, *dim_out);
                if self.wants(*input) {
                    let mut di = vec![F::zero(); rows * d];
                    gemm(g, Layout::row_major(rows, e), self.data(*weight), Layout::row_major(d, e).transposed(), F::zero(), &mut di, Layout::row_major(rows, d));
                    out.push((*input, di));
                }
                if self.wants(*weight) {
                    let mut dw = vec![F::zero(); d * e];
                    gemm(self.data(*input), Layout::row_major(rows, d).transposed(), g, Layout::row_major(rows, e), F::zero(), &mut dw, Layout::row_major(d, e));
                    out.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![F::zero(); e];
                    for row in g.chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((b, db));
                }
            }
            Op::Binary { kind, lhs, rhs, bcast } => {
                let (a, b) = (self.data(*lhs), self.data(*rhs));
                let n = g.len();
                let (la, lb) = match *bcast {
                    Broadcast::Same => (n, n),
                    Broadcast::Lhs(k) => (k, n),
                    Broadcast::Rhs(k) => (n, k),
                };
                if self.wants(*lhs) {
                    let mut da = vec![F::zero(); la];
                    for i in 0..n {
                        da[i % la] += match kind {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * b[i % lb],
                        };
                    }
                    out.push((*lhs, da));
                }
                if self.wants(*rhs) {
                    let mut db = vec![F::zero(); lb];
                    for i in 0..n {
                        db[i % lb] += match kind {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * a[i % la],
                        };
                    }
                    out.push((*rhs, db));
                }
            }
            Op::Unary { kind, input } => {
                if self.wants(*input) {
                    let x = self.data(*input);
                    let d: Vec<F> = (0..g.len())
                        .map(|i| match kind {
                            Unary::Sigmoid => g[i] * y[i] * (F::one() - y[i]),
                            Unary::Tanh => g[i] * (F::one() - y[i] * y[i]),
                            Unary::Relu => {
                                if x[i] > F::zero() {
                                    g[i]
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Log => g[i] / x[i],
                            Unary::Exp => g[i] * y[i],
                            Unary::OneMinus | Unary::Neg => -g[i],
                        })
                        .collect();
                    out.push((*input, d));
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(*input) {
                    out.push((*input, g.iter().map(|&v| v * *factor).collect()));
                }
            }
            Op::Clamp { input, lo, hi } => {
                if self.wants(*input) {
                    let x = self.data(*input);
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { F::zero() })
                        .collect();
                    out.push((*input, d));
                }
            }
            Op::Softmax { input } => {
                if self.wants(*input) {
                    let k = last_dim(node.value.shape());
                    let mut d = vec![F::zero(); g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::LogSoftmax { input } => {
                if self.wants(*input) {
                    let k = last_dim(node.value.shape());
                    let mut d = vec![F::zero(); g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let total: F = gr.iter().copied().sum();
                        for j in 0..k {
                            dr[j] = gr[j] - yr[j].exp() * total;
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Sum { input } => {
                if self.wants(*input) {
                    out.push((*input, vec![g[0]; self.value(*input).numel()]));
                }
            }
            Op::Mean { input } => {
                if self.wants(*input) {
                    let n = self.value(*input).numel();
                    out.push((*input, vec![g[0] / F::lit(n as f64); n]));
                }
            }
            Op::SumLast { input } => {
                if self.wants(*input) {
                    let k = last_dim(self.shape(*input));
                    out.push((*input, g.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect()));
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    out.push((*input, g.to_vec()));
                }
            }
            Op::Expand { input, dim, times } => {
                if self.wants(*input) {
                    let shape = self.shape(*input);
                    let outer: usize = shape[..*dim].iter().product();
                    let inner: usize = shape[*dim + 1..].iter().product();
                    let mut d = vec![F::zero(); outer * inner];
                    for o in 0..outer {
                        for r in 0..*times {
                            let src = &g[(o * times + r) * inner..(o * times + r + 1) * inner];
                            d[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Narrow { input, start, len } => {
                if self.wants(*input) {
                    let k = last_dim(self.shape(*input));
                    let mut d = vec![F::zero(); self.value(*input).numel()];
                    for (dr, gr) in d.chunks_mut(k).zip(g.chunks(*len)) {
                        dr[*start..*start + *len].copy_from_slice(gr);
                    }
                    out.push((*input, d));
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    let mut d = vec![F::zero(); self.value(*table).numel()];
                    for (row, &i) in g.chunks(e).zip(ids) {
                        d[i * e..(i + 1) * e].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*table, d));
                }
            }
            Op::Pick { input, ids } => {
                if self.wants(*input) {
                    let m = self.shape(*input)[1];
                    let mut d = vec![F::zero(); self.value(*input).numel()];
                    for (n, &i) in ids.iter().enumerate() {
                        d[n * m + i] += g[n];
                    }
                    out.push((*input, d));
                }
            }
            Op::Resize { input, planes, in_h, in_w, out_h, out_w } => {
                if self.wants(*input) {
                    out.push((*input, bilinear_backward(g, *planes, *in_h, *in_w, *out_h, *out_w)));
                }
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, batch_stats } => {
                let c = inv_std.len();
                let shape = self.shape(*input);
                let plane = shape[2] * shape[3];
                let count = F::lit((shape[0] * plane) as f64);
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for (i, (&gi, &xi)) in g.iter().zip(normalized).enumerate() {
                    let ch = (i / plane) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xi;
                }
                if self.wants(*input) {
                    let gamma = self.data(*gamma);
                    let di = g
                        .iter()
                        .zip(normalized)
                        .enumerate()
                        .map(|(i, (&gi, &xi))| {
                            let ch = (i / plane) % c;
                            let scale = gamma[ch] * inv_std[ch];
                            if *batch_stats {
                                scale * (gi - sum_g[ch] / count - xi * sum_gx[ch] / count)
                            } else {
                                scale * gi
                            }
                        })
                        .collect();
                    out.push((*input, di));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    out.push((*beta, sum_g));
                }
            }
        }
        out
    }
}
