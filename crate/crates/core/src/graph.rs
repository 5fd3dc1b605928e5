//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the information its backward rule needs. Nodes only ever reference earlier
//! nodes, so walking the tape backwards is a valid reverse topological order.
//! A fresh graph is built for every episode.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, dims4, PoolMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-normalisation call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        k: usize,
        cols: Vec<f64>,
    },
    /// `a + b` with `b` broadcast into `a`.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// `a ⊙ b` with `b` broadcast into `a`.
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Square { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool2 { x: Var, arg: Vec<usize> },
    GlobalPool { x: Var, mode: PoolMode, arg: Vec<usize> },
    ChannelPool { x: Var, mode: PoolMode, arg: Vec<usize> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Reshape { x: Var },
    BroadcastConcat { visual: Var, attrs: Var },
    ConcatChannels { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    NegSqDist { q: Var, p: Var },
    Softmax { x: Var },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
        scale: f64,
    },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` requires grad and is reachable.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    /// Like [`get`](Self::get) but a missing gradient is zero.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Right-aligned broadcast of `small` into `big`; returns `small`'s strides
/// padded to `big`'s rank with zeros on broadcast axes.
fn broadcast_strides(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return shape_err(format!("cannot broadcast {small:?} into {big:?}"));
    }
    let pad = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let d = small[i];
        if d != 1 && d != big[i + pad] {
            return shape_err(format!("cannot broadcast {small:?} into {big:?}"));
        }
        strides[i + pad] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    Ok(strides)
}

/// Calls `f(flat_big, flat_small)` for every element of `big`.
fn for_each_broadcast(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = big.iter().product();
    let rank = big.len();
    let mut idx = vec![0usize; rank];
    let mut small = 0usize;
    for flat in 0..n {
        f(flat, small);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            small += strides[ax];
            if idx[ax] < big[ax] {
                break;
            }
            small -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let dims = dims4(x, "conv2d input")?;
        let (k, cout) = ops::kernel_dims(self.value(kernel), dims[3])?;
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return shape_err(format!("conv bias length {} != Cout {cout}", self.value(b).len()));
            }
        }
        let cols = ops::im2col(x.data(), dims, k);
        let rows = dims[0] * dims[1] * dims[2];
        let out = ops::conv_output(
            &cols,
            rows,
            k * k * dims[3],
            self.value(kernel).data(),
            cout,
            bias.map(|b| self.value(b)),
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = out.reshape(&shape)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                k,
                cols,
            },
            &inputs,
        ))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let strides = broadcast_strides(av.shape(), bv.shape())?;
        let mut out = vec![0.0; av.len()];
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(av.shape(), &strides, |i, j| out[i] = f(ad[i], bd[j]));
        Tensor::new(av.shape(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("sub of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.broadcast_binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = ops::max_pool2_with_arg(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, arg }, &[x]))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, arg) = ops::global_pool_with_arg(self.value(x), mode)?;
        Ok(self.push(out, Op::GlobalPool { x, mode, arg }, &[x]))
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, arg) = ops::channel_pool_with_arg(self.value(x), mode)?;
        Ok(self.push(out, Op::ChannelPool { x, mode, arg }, &[x]))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return shape_err(format!("matmul of {:?} and {:?}", self.shape(a), self.shape(b)));
        };
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} != {k2}"));
        }
        let mut out = vec![0.0; m * n];
        ops::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Affine map over the last axis: `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().unwrap();
        let rows = self.value(x).len() / din;
        let flat = self.reshape(x, &[rows, din])?;
        let prod = self.matmul(flat, w)?;
        let out = self.add(prod, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(out, &out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// `[B,H,W,C]` visual with `[B,A]` attributes → `[B,H,W,C+A]`.
    pub fn broadcast_concat(&mut self, visual: Var, attrs: Var) -> Result<Var> {
        let out = ops::broadcast_concat(self.value(visual), self.value(attrs))?;
        Ok(self.push(out, Op::BroadcastConcat { visual, attrs }, &[visual, attrs]))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return shape_err(format!("concat_channels of {first:?} and {s:?}"));
            }
            widths.push(*s.last().unwrap());
        }
        let positions: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(positions * total);
        for pos in 0..positions {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[pos * w..(pos + 1) * w]);
            }
        }
        let mut shape = first.clone();
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }, parts))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return shape_err(format!("concat_rows of {first:?} and {s:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start >= end || end > s[0] {
            return shape_err(format!("row range {start}..{end} outside 0..{}", s[0]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Training-mode batch normalisation over every axis but the last.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = self.value(x).last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("batch_norm scale/shift must have {c} entries"));
        }
        let xd = self.value(x).data();
        let count = xd.len() / c;
        let mut mean = vec![0.0; c];
        for cell in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(cell) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for cell in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(cell).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for cell in xd.chunks(c) {
            for ch in 0..c {
                let h = (cell[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let out = Tensor::new(self.shape(x), out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// `out[i,j] = −‖q_i − p_j‖²` for `q: [Q,C]`, `p: [N,C]`.
    pub fn neg_sq_dist(&mut self, q: Var, p: Var) -> Result<Var> {
        let (&[nq, c], &[np, c2]) = (self.shape(q), self.shape(p)) else {
            return shape_err(format!("neg_sq_dist of {:?} and {:?}", self.shape(q), self.shape(p)));
        };
        if c != c2 {
            return shape_err(format!("neg_sq_dist widths {c} != {c2}"));
        }
        let (qd, pd) = (self.value(q).data(), self.value(p).data());
        let out = Tensor::from_fn(&[nq, np], |i| {
            let (a, b) = (&qd[(i / np) * c..][..c], &pd[(i % np) * c..][..c]);
            -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        });
        Ok(self.push(out, Op::NegSqDist { q, p }, &[q, p]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// `scale · Σ_j −log(max(p[j, y_j], floor))` over rows of `probs`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: f64, scale: f64) -> Result<Var> {
        let &[rows, n] = self.shape(probs) else {
            return shape_err(format!("nll expects [Q,N] probabilities, got {:?}", self.shape(probs)));
        };
        if labels.len() != rows || labels.iter().any(|&l| l >= n) {
            return shape_err(format!("{} labels for {rows} rows of width {n}", labels.len()));
        }
        let pd = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(j, &y)| -pd[j * n + y].max(floor).ln())
            .sum();
        let out = Tensor::scalar(scale * total);
        Ok(self.push(
            out,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                floor,
                scale,
            },
            &[probs],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Accumulation buffer for `v`, or `None` if `v` needs no gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                k,
                cols,
            } => {
                let x = self.value(*input);
                let dims = dims4(x, "conv2d").expect("validated in forward");
                let rows = dims[0] * dims[1] * dims[2];
                let inner = k * k * dims[3];
                let cout = out.last_dim();
                if let Some(gk) = self.slot(grads, *kernel) {
                    ops::gemm(inner, rows, cout, cols, true, g, false, 1.0, gk);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(cout) {
                            for (s, &v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * inner];
                    ops::gemm(rows, cout, inner, g, false, self.value(*kernel).data(), true, 0.0, &mut dcols);
                    let gx = self.slot(grads, *input).unwrap();
                    ops::col2im_add(&dcols, dims, *k, gx);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if self.nodes[b.0].requires_grad {
                    let strides = broadcast_strides(self.shape(*a), self.shape(*b)).unwrap();
                    let gb = self.slot(grads, *b).unwrap();
                    for_each_broadcast(self.shape(*a), &strides, |i, j| gb[j] += g[i]);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, v)| *s -= v);
                }
            }
            Op::Mul { a, b } => {
                let strides = broadcast_strides(self.shape(*a), self.shape(*b)).unwrap();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for_each_broadcast(self.shape(*a), &strides, |i, j| ga[i] += g[i] * bd[j]);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for_each_broadcast(self.shape(*a), &strides, |i, j| gb[j] += g[i] * ad[i]);
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s += c * v);
                }
            }
            Op::Square { x } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, v), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *s += 2.0 * xv * v;
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, v), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *s += v;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((s, v), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *s += v * y * (1.0 - y);
                    }
                }
            }
            Op::MaxPool2 { x, arg }
            | Op::GlobalPool {
                x,
                mode: PoolMode::Max,
                arg,
            }
            | Op::ChannelPool {
                x,
                mode: PoolMode::Max,
                arg,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, v) in arg.iter().zip(g) {
                        gx[src] += v;
                    }
                }
            }
            Op::GlobalPool {
                x,
                mode: PoolMode::Avg,
                ..
            } => {
                let [b, h, w, c] = dims4(self.value(*x), "").unwrap();
                let hw = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for p in 0..hw {
                            let base = (bi * hw + p) * c;
                            for ch in 0..c {
                                gx[base + ch] += g[bi * c + ch] / hw as f64;
                            }
                        }
                    }
                }
            }
            Op::ChannelPool {
                x,
                mode: PoolMode::Avg,
                ..
            } => {
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (p, v) in g.iter().enumerate() {
                        for s in &mut gx[p * c..(p + 1) * c] {
                            *s += v / c as f64;
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ops::gemm(*m, *n, *k, g, false, self.value(*b).data(), true, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    ops::gemm(*k, *m, *n, self.value(*a).data(), true, g, false, 1.0, gb);
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::BroadcastConcat { visual, attrs } => {
                let c = self.value(*visual).last_dim();
                let a = self.value(*attrs).last_dim();
                let width = c + a;
                let b = self.value(*attrs).len() / a;
                let positions = out.len() / width / b;
                if let Some(gv) = self.slot(grads, *visual) {
                    for (p, cell) in g.chunks(width).enumerate() {
                        for (s, v) in gv[p * c..(p + 1) * c].iter_mut().zip(&cell[..c]) {
                            *s += v;
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *attrs) {
                    for (p, cell) in g.chunks(width).enumerate() {
                        let bi = p / positions;
                        for (s, v) in ga[bi * a..(bi + 1) * a].iter_mut().zip(&cell[c..]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::ConcatChannels { parts } => {
                let total = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for (pos, cell) in g.chunks(total).enumerate() {
                            for (s, v) in gp[pos * w..(pos + 1) * w].iter_mut().zip(&cell[offset..offset + w]) {
                                *s += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, v)| *s += v);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let inner = out.len() / out.shape()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, v)| *s += v);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (cell, hcell) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += cell[ch];
                        sum_dy_xhat[ch] += cell[ch] * hcell[ch];
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(s, v)| *s += v);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(s, v)| *s += v);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, cell), hcell) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch] / m;
                            dst[ch] += scale * (m * cell[ch] - sum_dy[ch] - hcell[ch] * sum_dy_xhat[ch]);
                        }
                    }
                }
            }
            Op::NegSqDist { q, p } => {
                let (qd, pd) = (self.value(*q).data(), self.value(*p).data());
                let c = self.value(*q).last_dim();
                let np = self.shape(*p)[0];
                if let Some(gq) = self.slot(grads, *q) {
                    for (i, row) in g.chunks(np).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            for ch in 0..c {
                                gq[i * c + ch] += -2.0 * v * (qd[i * c + ch] - pd[j * c + ch]);
                            }
                        }
                    }
                }
                if let Some(gp) = self.slot(grads, *p) {
                    for (i, row) in g.chunks(np).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            for ch in 0..c {
                                gp[j * c + ch] += 2.0 * v * (qd[i * c + ch] - pd[j * c + ch]);
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let n = out.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dst, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            dst[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                }
            }
            Op::Nll {
                probs,
                labels,
                floor,
                scale,
            } => {
                let n = self.value(*probs).last_dim();
                let pd = self.value(*probs).data();
                if let Some(gp) = self.slot(grads, *probs) {
                    for (j, &y) in labels.iter().enumerate() {
                        let p = pd[j * n + y];
                        if p > *floor {
                            gp[j * n + y] -= g[0] * scale / p;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
        }
    }
}
