//! Reverse-mode differentiation over a flat tape of tensor operations.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are stored in
//! creation order, so the tape is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse, summing contributions at
//! fan-out nodes.
//!
//! ```
//! use iac::autodiff::Graph;
//! use iac::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::gauss;
use crate::tensor::Tensor;
use conv::{gemm, ConvGeom};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * x + offset`
    Affine(Var, f64),
    Sqrt(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Clamp(Var, f64, f64),
    LowerBound(Var, f64),
    Sum(Var),
    Mean(Var),
    NormalCdf(Var),
    /// Identity backward regardless of the forward map.
    Straight(Var),
    Reshape(Var),
    BiasAdd(Var, Var),
    BroadcastChannels(Var),
    SliceChannels { x: Var, start: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when `target` depends on `source` through recorded operations.
    pub fn depends_on(&self, target: Var, source: Var) -> bool {
        if source.0 > target.0 {
            return false;
        }
        let mut reach = vec![false; target.0 + 1];
        reach[target.0] = true;
        for i in (source.0..=target.0).rev() {
            if !reach[i] {
                continue;
            }
            if i == source.0 {
                return true;
            }
            for input in self.inputs(i) {
                reach[input.0] = true;
            }
        }
        false
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::BiasAdd(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::Affine(x, _)
            | Op::Sqrt(x)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::LeakyRelu(x, _)
            | Op::Softplus(x)
            | Op::Clamp(x, _, _)
            | Op::LowerBound(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::NormalCdf(x)
            | Op::Straight(x)
            | Op::Reshape(x)
            | Op::BroadcastChannels(x)
            | Op::SliceChannels { x, .. } => vec![*x],
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.binary(a, b, v, Op::Div(a, b)))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.value(x).map(|a| scale * a + offset);
        self.unary(x, v, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sqrt);
        self.unary(x, v, Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.unary(x, v, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.unary(x, v, Op::Log(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a >= 0.0 { a } else { slope * a });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.unary(x, v, Op::Softplus(x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    /// `max(x, bound)`; below the bound the gradient still flows when it
    /// would push `x` upward under gradient descent.
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Var {
        let v = self.value(x).map(|a| a.max(bound));
        self.unary(x, v, Op::LowerBound(x, bound))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(x, v, Op::Mean(x))
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gauss::std_normal_cdf);
        self.unary(x, v, Op::NormalCdf(x))
    }

    /// Applies `f` in the forward pass and passes gradients through unchanged.
    pub fn straight_through(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        self.unary(x, v, Op::Straight(x))
    }

    /// Round to nearest integer (ties away from zero) with a straight-through gradient.
    pub fn ste_round(&mut self, x: Var) -> Var {
        self.straight_through(x, f64::round)
    }

    /// Adds i.i.d. `Uniform(-width/2, width/2)` noise; identity backward.
    pub fn add_uniform_noise<R: Rng>(&mut self, x: Var, width: f64, rng: &mut R) -> Result<Var> {
        if !(width > 0.0) {
            return Err(shape_err("add_uniform_noise", format!("width {width} must be > 0")));
        }
        let shape = self.value(x).shape().to_vec();
        let numel = self.value(x).len();
        let noise: Vec<f64> = (0..numel)
            .map(|_| width * (rng.gen::<f64>() - 0.5))
            .collect();
        let n = self.constant(Tensor::new(shape, noise)?);
        self.add(x, n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Adds a per-channel bias `b[C]` to `x[N, C, H, W]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("bias_add")?;
        if self.value(b).shape() != [c] {
            return Err(shape_err(
                "bias_add",
                format!("input {:?}, bias {:?}", self.value(x).shape(), self.value(b).shape()),
            ));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        let plane = h * w;
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let bc = bias[i % c];
            chunk.iter_mut().for_each(|a| *a += bc);
        }
        debug_assert_eq!(v.len(), n * c * plane);
        Ok(self.binary(x, b, v, Op::BiasAdd(x, b)))
    }

    /// Broadcasts a per-channel vector `v[C]` to `[N, C, H, W]`.
    pub fn broadcast_channels(&mut self, v: Var, shape: [usize; 4]) -> Result<Var> {
        let [n, c, h, w] = shape;
        if self.value(v).shape() != [c] {
            return Err(shape_err(
                "broadcast_channels",
                format!("{:?} to {shape:?}", self.value(v).shape()),
            ));
        }
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &s in src {
                data.extend(std::iter::repeat_n(s, h * w));
            }
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.unary(v, t, Op::BroadcastChannels(v)))
    }

    /// Channels `start..start+len` of `x[N, C, H, W]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
        if start + len > c {
            return Err(shape_err(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&src[from..from + len * plane]);
        }
        let t = Tensor::new(vec![n, len, h, w], data)?;
        Ok(self.unary(x, t, Op::SliceChannels { x, start }))
    }

    /// Strided cross-correlation. `x: [N, C, H, W]`, `w: [O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, wc, k, k2] = self.value(w).dims4("conv2d")?;
        if wc != c || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}, pad {pad}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            in_h: h,
            in_w: wd,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        };
        let (rows, cols_n) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; n * o * cols_n];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for b in 0..n {
            geom.im2col(&xs[b * c * h * wd..(b + 1) * c * h * wd], &mut cols);
            gemm(o, rows, cols_n, ws, false, &cols, false, 0.0, &mut out[b * o * cols_n..(b + 1) * o * cols_n]);
        }
        let t = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.binary(x, w, t, Op::Conv2d { x, w, geom }))
    }

    /// Transposed convolution (adjoint of [`conv2d`](Self::conv2d) with the
    /// same stride and padding). `x: [N, Cin, H, W]`, `w: [Cin, Cout, K, K]`;
    /// output extent is `(H - 1) * stride - 2 * pad + K + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wcin, cout, k, k2] = self.value(w).dims4("conv_transpose2d")?;
        let bad = wcin != cin
            || k != k2
            || stride == 0
            || output_pad >= stride.max(1)
            || (h.max(1) - 1) * stride + k + output_pad < 2 * pad + 1;
        if bad {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "input {:?}, weight {:?}, stride {stride}, pad {pad}, output_pad {output_pad}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        let out_h = (h - 1) * stride + k + output_pad - 2 * pad;
        let out_w = (wd - 1) * stride + k + output_pad - 2 * pad;
        // Conv geometry mapping the (larger) output image onto the input grid.
        let geom = ConvGeom {
            channels: cout,
            in_h: out_h,
            in_w: out_w,
            out_h: h,
            out_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (rows, cols_n) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * cols_n];
        let plane_out = cout * out_h * out_w;
        let mut out = vec![0.0; n * plane_out];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for b in 0..n {
            gemm(rows, cin, cols_n, ws, true, &xs[b * cin * cols_n..(b + 1) * cin * cols_n], false, 0.0, &mut cols);
            geom.col2im(&cols, &mut out[b * plane_out..(b + 1) * plane_out]);
        }
        let t = Tensor::new(vec![n, cout, out_h, out_w], out)?;
        Ok(self.binary(x, w, t, Op::ConvTranspose2d { x, w, geom }))
    }

    /// Generalized divisive normalization over channels:
    /// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`, or the inverse form
    /// `y_i = x_i * sqrt(...)`. `beta: [C]`, `gamma: [C, C]`.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let c = self.value(beta).len();
        let g4 = self.reshape(gamma, &[c, c, 1, 1])?;
        let sq = self.mul(x, x)?;
        let mixed = self.conv2d(sq, g4, 1, 0)?;
        let norm = self.bias_add(mixed, beta)?;
        let root = self.sqrt(norm);
        if inverse {
            self.mul(x, root)
        } else {
            self.div(x, root)
        }
    }

    /// Accumulates `d loss / d leaf` for every leaf created with [`param`](Self::param).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        grads.truncate(self.nodes.len());
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match self.nodes[i].op.clone() {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |gv, bv| gv * bv));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(bv, |gv, d| gv / d));
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(bv, |o, d| -o / d);
                    self.accumulate(grads, b, g.zip_map(&q, |gv, qv| gv * qv));
                }
            }
            Op::Affine(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            Op::Sqrt(x) => self.accumulate(grads, x, g.zip_map(out, |gv, o| gv * 0.5 / o)),
            Op::Abs(x) => {
                let d = self.value(x).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, g.zip_map(&d, |gv, dv| gv * dv));
            }
            Op::Exp(x) => self.accumulate(grads, x, g.zip_map(out, |gv, o| gv * o)),
            Op::Log(x) => {
                self.accumulate(grads, x, g.zip_map(self.value(x), |gv, xv| gv / xv))
            }
            Op::LeakyRelu(x, slope) => {
                let d = self.value(x).map(|v| if v >= 0.0 { 1.0 } else { slope });
                self.accumulate(grads, x, g.zip_map(&d, |gv, dv| gv * dv));
            }
            Op::Softplus(x) => {
                let d = self.value(x).map(sigmoid);
                self.accumulate(grads, x, g.zip_map(&d, |gv, dv| gv * dv));
            }
            Op::Clamp(x, lo, hi) => {
                let d = self.value(x).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                self.accumulate(grads, x, g.zip_map(&d, |gv, dv| gv * dv));
            }
            Op::LowerBound(x, bound) => {
                let xv = self.value(x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v < bound && *dv > 0.0 {
                        *dv = 0.0;
                    }
                }
                self.accumulate(grads, x, d);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, x, Tensor::full(self.value(x).shape(), s));
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let s = g.item() / xv.len() as f64;
                self.accumulate(grads, x, Tensor::full(xv.shape(), s));
            }
            Op::NormalCdf(x) => {
                let d = self.value(x).map(gauss::std_normal_pdf);
                self.accumulate(grads, x, g.zip_map(&d, |gv, dv| gv * dv));
            }
            Op::Straight(x) => self.accumulate(grads, x, g.clone()),
            Op::Reshape(x) => {
                let r = g.clone().reshape(self.value(x).shape())?;
                self.accumulate(grads, x, r);
            }
            Op::BiasAdd(x, b) => {
                if self.wants(b) {
                    let c = self.value(b).len();
                    let [_, _, h, w] = g.dims4("bias_add")?;
                    let mut db = vec![0.0; c];
                    for (k, chunk) in g.data().chunks(h * w).enumerate() {
                        db[k % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, b, Tensor::from_vec(db));
                }
                self.accumulate(grads, x, g.clone());
            }
            Op::BroadcastChannels(v) => {
                let [_, c, h, w] = g.dims4("broadcast_channels")?;
                let mut dv = vec![0.0; c];
                for (k, chunk) in g.data().chunks(h * w).enumerate() {
                    dv[k % c] += chunk.iter().sum::<f64>();
                }
                self.accumulate(grads, v, Tensor::from_vec(dv));
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let to = (b * c + start) * plane;
                    let from = b * len * plane;
                    dx.data_mut()[to..to + len * plane]
                        .copy_from_slice(&g.data()[from..from + len * plane]);
                }
                self.accumulate(grads, x, dx);
            }
            Op::Conv2d { x, w, geom } => self.conv2d_backward(x, w, geom, g, grads),
            Op::ConvTranspose2d { x, w, geom } => {
                self.conv_transpose2d_backward(x, w, geom, g, grads)
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        geom: ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.shape()[0];
        let o = wv.shape()[0];
        let (rows, cols_n) = (geom.rows(), geom.cols());
        let in_plane = geom.channels * geom.in_h * geom.in_w;
        let mut cols = vec![0.0; rows * cols_n];
        let mut dw = self.wants(w).then(|| vec![0.0; o * rows]);
        let mut dx = self.wants(x).then(|| vec![0.0; n * in_plane]);
        for b in 0..n {
            let gout = &g.data()[b * o * cols_n..(b + 1) * o * cols_n];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(&xv.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
                gemm(o, cols_n, rows, gout, false, &cols, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, o, cols_n, wv.data(), true, gout, false, 0.0, &mut cols);
                geom.col2im(&cols, &mut dx[b * in_plane..(b + 1) * in_plane]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        geom: ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.shape()[0];
        let cin = xv.shape()[1];
        let (rows, cols_n) = (geom.rows(), geom.cols());
        let out_plane = geom.channels * geom.in_h * geom.in_w;
        let mut cols = vec![0.0; rows * cols_n];
        let mut dw = self.wants(w).then(|| vec![0.0; cin * rows]);
        let mut dx = self.wants(x).then(|| vec![0.0; n * cin * cols_n]);
        for b in 0..n {
            geom.im2col(&g.data()[b * out_plane..(b + 1) * out_plane], &mut cols);
            let xb = &xv.data()[b * cin * cols_n..(b + 1) * cin * cols_n];
            if let Some(dw) = dw.as_mut() {
                gemm(cin, cols_n, rows, xb, false, &cols, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(cin, rows, cols_n, wv.data(), false, &cols, false, 0.0, &mut dx[b * cin * cols_n..(b + 1) * cin * cols_n]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // log(exp(y) - 1) = y + log(1 - exp(-y))
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
