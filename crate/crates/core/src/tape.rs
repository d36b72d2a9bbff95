//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation whose inputs require gradients, in
//! execution order, so the record is topologically sorted by construction.
//! [`Graph::backward`] walks it once in reverse and accumulates gradients
//! into the leaves that asked for them.
//!
//! Tape policy: the record is never cleared by `backward`. A second call
//! accumulates into the same leaf gradients; [`Graph::zero_grad`] resets
//! them. Graphs are cheap and meant to be rebuilt for every training step.
//!
//! Operations whose inputs are all constants are evaluated eagerly and stored
//! as constants, so nothing is recorded for pure inference.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry for a (channels, height, width) input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    Offset(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    /// Full reduction to the element at the stored flat index.
    Select(Var, usize),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Lower clamp applied by [`Graph::log`].
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(value, op, requires_grad))
    }

    fn binary_shape(&self, name: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(name, sa, sb))
        }
    }

    fn zip_with(&self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = va.len().max(vb.len());
        let data: Vec<F> = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            let y = vb[0];
            va.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = va[0];
            vb.iter().map(|&y| f(x, y)).collect()
        };
        debug_assert_eq!(data.len(), n);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Elementwise sum; either operand may be a one-element tensor, which is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: F) -> Result<Var> {
        let out = self.value(a).map(|x| x + shift);
        self.push("offset", out, Op::Offset(a), &[a])
    }

    /// Matrix product of `(m, k)` and `(k, n)` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution (cross-correlation) of a `(C, H, W)` map with an
    /// `(O, C, KH, KW)` kernel and optional `(O)` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        if params.stride == 0 {
            return Err(Error::Contract("conv2d: stride must be positive".into()));
        }
        let out_channels = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [out_channels] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let (padded_h, padded_w) = (si[1] + 2 * params.padding, si[2] + 2 * params.padding);
        if padded_h < sw[2] || padded_w < sw[3] {
            return Err(Error::shape("conv2d", &si, &sw));
        }
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            kernel_h: sw[2],
            kernel_w: sw[3],
            out_h: (padded_h - sw[2]) / params.stride + 1,
            out_w: (padded_w - sw[3]) / params.stride + 1,
            stride: params.stride,
            padding: params.padding,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (p, q) = (geom.patch_len(), geom.out_len());
        let mut out = vec![F::zero(); out_channels * q];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_exact_mut(q).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        F::gemm(
            out_channels,
            p,
            q,
            F::one(),
            self.value(weight).data(),
            p as isize,
            1,
            &cols,
            q as isize,
            1,
            F::one(),
            &mut out,
            q as isize,
            1,
        );
        let value = Tensor::from_parts(vec![out_channels, geom.out_h, geom.out_w], out);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Non-overlapping max pooling over `size x size` windows of a `(C, H, W)` map.
    /// Gradient ties go to the first maximal element in row-major order.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || size == 0 || s[1] < size || s[2] < size {
            return Err(Error::shape("max_pool2d", &s, &[size, size]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / size, w / size);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let plane = ch * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = plane + i * size * w + j * size;
                    let mut best = x[best_idx];
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = plane + (i * size + di) * w + j * size + dj;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::from_parts(vec![c, oh, ow], out);
        self.push("max_pool2d", value, Op::MaxPool2d { input, argmax }, &[input])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(F::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    /// Natural log of `max(x, LOG_EPS)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let eps = F::from_f64(LOG_EPS);
        let out = self.value(a).map(|x| x.max(eps).ln());
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Spatial mean of a `(C, H, W)` map, giving `(C)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", &s, &[0, 0, 0]));
        }
        let area = s[1] * s[2];
        let denom = F::from_f64(area as f64);
        let out: Vec<F> = self
            .value(a)
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().copied().sum::<F>() / denom)
            .collect();
        self.push(
            "global_avg_pool",
            Tensor::from_parts(vec![s[0]], out),
            Op::GlobalAvgPool(a),
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum_value());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum_value() / F::from_f64(v.len() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Maximum element; the gradient goes to the first maximal element.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let idx = first_index_by(self.value(a).data(), |x, best| x > best);
        let out = Tensor::scalar(self.value(a).data()[idx]);
        self.push("max", out, Op::Select(a, idx), &[a])
    }

    /// Minimum element; the gradient goes to the first minimal element.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        let idx = first_index_by(self.value(a).data(), |x, best| x < best);
        let out = Tensor::scalar(self.value(a).data()[idx]);
        self.push("min", out, Op::Select(a, idx), &[a])
    }

    /// Populates gradients of `loss` on every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.sweep(loss, 0)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                let g = Tensor::from_parts(node.value.shape().to_vec(), g);
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `output` with respect to an intermediate node,
    /// without touching any accumulated leaf gradient.
    pub fn gradient_wrt(&self, output: Var, target: Var) -> Result<Tensor<F>> {
        if !self.requires_grad(target) {
            return Err(Error::Contract(
                "gradient_wrt: target does not require gradients".into(),
            ));
        }
        if target > output {
            return Ok(Tensor::zeros(self.shape(target).to_vec()));
        }
        let mut grads = self.sweep(output, target.0)?;
        let g = grads[target.0]
            .take()
            .unwrap_or_else(|| vec![F::zero(); self.value(target).len()]);
        Ok(Tensor::from_parts(self.shape(target).to_vec(), g))
    }

    /// Reverse sweep from `output` down to node index `stop` (inclusive).
    fn sweep(&self, output: Var, stop: usize) -> Result<Vec<Option<Vec<F>>>> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(output) {
            return Ok(grads);
        }
        grads[output.0] = Some(vec![F::one()]);
        for i in (stop..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, grads, g.iter().copied());
                self.accum_broadcast(*b, grads, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, grads, g.iter().copied());
                self.accum_broadcast(*b, grads, g.iter().map(|&x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let it = g.iter().enumerate().map(|(k, &x)| x * bcast(vb, k));
                    self.accum_broadcast(*a, grads, it);
                }
                if self.needs(*b) {
                    let it = g.iter().enumerate().map(|(k, &x)| x * bcast(va, k));
                    self.accum_broadcast(*b, grads, it);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let it = g.iter().enumerate().map(|(k, &x)| x / bcast(vb, k));
                    self.accum_broadcast(*a, grads, it);
                }
                if self.needs(*b) {
                    let it = g.iter().enumerate().map(|(k, &x)| {
                        let d = bcast(vb, k);
                        -x * bcast(va, k) / (d * d)
                    });
                    self.accum_broadcast(*b, grads, it);
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accum(*a, grads, g.iter().map(|&x| x * f));
            }
            Op::Offset(a) | Op::Reshape(a) => self.accum(*a, grads, g.iter().copied()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = G . B^T
                    let buf = slot(grads, *a, m * k);
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        F::one(),
                        buf,
                        k as isize,
                        1,
                    );
                }
                if self.needs(*b) {
                    // dB = A^T . G
                    let buf = slot(grads, *b, k * n);
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::one(),
                        buf,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let out_channels = self.shape(*weight)[0];
                let (p, q) = (geom.patch_len(), geom.out_len());
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let sums: Vec<F> = g.chunks_exact(q).map(|row| row.iter().copied().sum()).collect();
                        self.accum(*b, grads, sums.into_iter());
                    }
                }
                if self.needs(*weight) {
                    // dW = G . cols^T
                    let buf = slot(grads, *weight, out_channels * p);
                    F::gemm(
                        out_channels,
                        q,
                        p,
                        F::one(),
                        g,
                        q as isize,
                        1,
                        cols,
                        1,
                        q as isize,
                        F::one(),
                        buf,
                        p as isize,
                        1,
                    );
                }
                if self.needs(*input) {
                    // dcols = W^T . G, then scatter back onto the input grid
                    let mut dcols = vec![F::zero(); p * q];
                    F::gemm(
                        p,
                        out_channels,
                        q,
                        F::one(),
                        self.value(*weight).data(),
                        1,
                        p as isize,
                        g,
                        q as isize,
                        1,
                        F::zero(),
                        &mut dcols,
                        q as isize,
                        1,
                    );
                    let n = geom.channels * geom.height * geom.width;
                    col2im_accumulate(&dcols, geom, slot(grads, *input, n));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let n = self.value(*input).len();
                let buf = slot(grads, *input, n);
                for (&idx, &x) in argmax.iter().zip(g) {
                    buf[idx] += x;
                }
            }
            Op::Relu(a) => {
                let out = node.value.data();
                let it = g
                    .iter()
                    .zip(out)
                    .map(|(&x, &y)| if y > F::zero() { x } else { F::zero() });
                self.accum(*a, grads, it);
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accum(*a, grads, g.iter().zip(out).map(|(&x, &y)| x * y));
            }
            Op::Log(a) => {
                let eps = F::from_f64(LOG_EPS);
                let va = self.value(*a).data();
                let it = g
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v > eps { x / v } else { F::zero() });
                self.accum(*a, grads, it);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let area = s[1] * s[2];
                let denom = F::from_f64(area as f64);
                let it = g.iter().flat_map(|&x| std::iter::repeat_n(x / denom, area));
                self.accum(*a, grads, it);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accum(*a, grads, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let x = g[0] / F::from_f64(n as f64);
                self.accum(*a, grads, std::iter::repeat_n(x, n));
            }
            Op::Select(a, idx) => {
                let n = self.value(*a).len();
                slot(grads, *a, n)[*idx] += g[0];
            }
        }
    }

    fn accum(&self, v: Var, grads: &mut [Option<Vec<F>>], it: impl Iterator<Item = F>) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let buf = slot(grads, v, n);
        for (a, b) in buf.iter_mut().zip(it) {
            *a += b;
        }
    }

    /// Accumulates an output-shaped gradient, summing it down when `v` was broadcast.
    fn accum_broadcast(&self, v: Var, grads: &mut [Option<Vec<F>>], it: impl Iterator<Item = F>) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).len();
        let buf = slot(grads, v, n);
        if n == 1 {
            buf[0] += it.sum::<F>();
        } else {
            for (a, b) in buf.iter_mut().zip(it) {
                *a += b;
            }
        }
    }
}

#[inline]
fn bcast<F: Copy>(v: &[F], k: usize) -> F {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

fn first_index_by<F: Copy>(data: &[F], better: impl Fn(F, F) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in data.iter().enumerate().skip(1) {
        if better(x, data[best]) {
            best = i;
        }
    }
    best
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let q = g.out_len();
    let mut cols = vec![F::zero(); g.patch_len() * q];
    for c in 0..g.channels {
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let dst = &mut cols[row * q..(row + 1) * q];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + ih as usize) * g.width..][..g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[oh * g.out_w + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accumulate<F: Real>(cols: &[F], g: &ConvGeom, out: &mut [F]) {
    let q = g.out_len();
    for c in 0..g.channels {
        for kh in 0..g.kernel_h {
            for kw in 0..g.kernel_w {
                let row = (c * g.kernel_h + kh) * g.kernel_w + kw;
                let src = &cols[row * q..(row + 1) * q];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.height + ih as usize) * g.width..][..g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
