use super::conv::{self, ConvGeom};
use super::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Clamp(Var, f64, f64),
    Conv2d(Var, Var, ConvGeom),
    Upsample2x(Var),
    AvgPool(Var, usize),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    QuatNormalize(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
///
/// Nodes are append-only: every op's inputs precede it, so node order is a
/// valid topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Leaves that require grad but were not
    /// reached by the loss get an all-zero gradient; `None` means `v` does not
    /// require grad.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        if !self.requires[v.0] {
            return None;
        }
        let n: usize = self.shapes[v.0].iter().product();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
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

    /// Adds a trainable (gradient-tracked) leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds `bias [n]` to every row of `x [m×n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.ndim() != 2 || tb.ndim() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(shape_err("add_row_bias", tx.shape(), tb.shape()));
        }
        let n = tb.numel();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// Adds `bias [c]` to every plane of `x [n×c×h×w]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.ndim() != 4 || tb.ndim() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(shape_err("add_channel_bias", tx.shape(), tb.shape()));
        }
        let c = tb.numel();
        let plane = tx.shape()[2] * tx.shape()[3];
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[bias.0].requires_grad;
        Ok(self.push(value, Op::AddChannelBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("nonpositive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise clamp; the gradient is zero wherever the input lies outside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Sum of all elements, in storage order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.sum() / t.numel() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// 2-D cross-correlation of `input [n×c×h×w]` with `kernel [f×c×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        if ti.ndim() != 4 || tk.ndim() != 4 || ti.shape()[1] != tk.shape()[1] {
            return Err(shape_err("conv2d", ti.shape(), tk.shape()));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (f, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::config(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d output extent not integral: input {h}×{w}, kernel {kh}×{kw}, stride {stride}, padding {padding}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = conv::conv2d_forward(&geom, ti.data(), tk.data());
        let value = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(value, Op::Conv2d(input, kernel, geom), rg))
    }

    /// Nearest-neighbour 2× spatial upsampling of `[n×c×h×w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() != 4 {
            return Err(shape_err("upsample2x", t.shape(), &[0, 0, 0, 0]));
        }
        let s = t.shape();
        let out = conv::upsample2x(t.data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Non-overlapping `k×k` average pooling of `[n×c×h×w]`; `k` must divide
    /// both spatial extents.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s = t.shape().to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::config(format!("avg_pool window {k} does not tile {s:?}")));
        }
        let out = conv::avg_pool(t.data(), s[0] * s[1], s[2], s[3], k);
        let value = Tensor::new(vec![s[0], s[1], s[2] / k, s[3] / k], out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::AvgPool(x, k), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rows = self.nodes[first.0].value.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.nodes[first.0].value.shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * wd..(r + 1) * wd]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() != 2 || start >= end || end > t.shape()[1] {
            return Err(shape_err("slice_cols", t.shape(), &[start, end]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    /// Selects rows (leading-axis slices) by index; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let rows = t.shape()[0];
        if indices.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", t.shape(), &[bad]));
        }
        let stride = t.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Normalizes each row of `x [b×4]` to a unit quaternion with a
    /// nonnegative scalar (first) component.
    pub fn quat_normalize(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.ndim() != 2 || t.shape()[1] != 4 {
            return Err(shape_err("quat_normalize", t.shape(), &[0, 4]));
        }
        let mut data = Vec::with_capacity(t.numel());
        for q in t.data().chunks(4) {
            let n = norm4(q);
            if n <= 1e-9 {
                return Err(Error::DegenerateRotation(n));
            }
            let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
            data.extend(q.iter().map(|v| s * v / n));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::QuatNormalize(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        let map1 = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..self.val(x).len()).map(f).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), &mut da, 0.0);
                    send(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), &mut db, 0.0);
                    send(*b, db);
                }
            }
            Op::AddRowBias(x, b) => {
                send(*x, g.to_vec());
                if self.wants(*b) {
                    let n = self.val(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    send(*b, db);
                }
            }
            Op::AddChannelBias(x, b) => {
                send(*x, g.to_vec());
                if self.wants(*b) {
                    let s = self.nodes[x.0].value.shape();
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    send(*b, db);
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::Relu(x) => {
                let vx = self.val(*x);
                send(*x, map1(*x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 }));
            }
            Op::Sigmoid(x) => send(*x, map1(*x, &|i| g[i] * out[i] * (1.0 - out[i]))),
            Op::Tanh(x) => send(*x, map1(*x, &|i| g[i] * (1.0 - out[i] * out[i]))),
            Op::Exp(x) => send(*x, map1(*x, &|i| g[i] * out[i])),
            Op::Log(x) => {
                let vx = self.val(*x);
                send(*x, map1(*x, &|i| g[i] / vx[i]));
            }
            Op::Abs(x) => {
                let vx = self.val(*x);
                send(*x, map1(*x, &|i| g[i] * sign0(vx[i])));
            }
            Op::Square(x) => {
                let vx = self.val(*x);
                send(*x, map1(*x, &|i| 2.0 * vx[i] * g[i]));
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Clamp(x, lo, hi) => {
                let vx = self.val(*x);
                send(
                    *x,
                    map1(*x, &|i| if vx[i] >= *lo && vx[i] <= *hi { g[i] } else { 0.0 }),
                );
            }
            Op::Conv2d(input, kernel, geom) => {
                let (di, dk) = conv::conv2d_backward(
                    geom,
                    self.val(*input),
                    self.val(*kernel),
                    g,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(di) = di {
                    send(*input, di);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                send(*x, conv::upsample2x_backward(g, s[0] * s[1], s[2], s[3]));
            }
            Op::AvgPool(x, k) => {
                let s = self.nodes[x.0].value.shape();
                send(*x, conv::avg_pool_backward(g, s[0] * s[1], s[2], s[3], *k));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let wd = self.nodes[p.0].value.shape()[1];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                        }
                        send(*p, dp);
                    }
                    offset += wd;
                }
            }
            Op::SliceCols(x, start) => {
                let s = self.nodes[x.0].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let wd = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + wd].copy_from_slice(&g[r * wd..(r + 1) * wd]);
                }
                send(*x, dx);
            }
            Op::GatherRows(x, indices) => {
                let t = &self.nodes[x.0].value;
                let stride = t.numel() / t.shape()[0];
                let mut dx = vec![0.0; t.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    dx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&g[k * stride..(k + 1) * stride])
                        .for_each(|(d, v)| *d += v);
                }
                send(*x, dx);
            }
            Op::QuatNormalize(x) => {
                let vx = self.val(*x);
                let mut dx = Vec::with_capacity(vx.len());
                for (q, gq) in vx.chunks(4).zip(g.chunks(4)) {
                    let n = norm4(q);
                    let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
                    let qg: f64 = q.iter().zip(gq).map(|(a, b)| a * b).sum();
                    let n3 = n * n * n;
                    dx.extend(q.iter().zip(gq).map(|(qi, gi)| s * (gi / n - qi * qg / n3)));
                }
                send(*x, dx);
            }
        }
    }
}

fn norm4(q: &[f64]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
