//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; [`Tape::backward`] replays the nodes in reverse
//! and propagates vector-Jacobian products. Nodes that cannot reach a
//! trainable parameter are skipped during the backward sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Acos(Var),
    Cos(Var),
    Clamp(Var, T, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows(Var),
    LogSoftmaxRows(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Dynamically built computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::contract(format!("{op}: expected a 2-D operand, got {shape:?}"))),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NumericFault { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value, op, param: None, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    // ---- leaves -------------------------------------------------------

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node { shape: t.shape().to_vec(), value: t.data().to_vec(), op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(&Tensor::scalar(value))
    }

    /// Binds a stored parameter. It participates in backward only if the
    /// tensor has `requires_grad` set; otherwise it behaves as a constant.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let trainable = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            param: trainable.then_some(id),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.nodes.push(Node { shape, value, op: Op::Leaf, param: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on a node of shape {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are validated")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a), &[a])
    }

    /// 2-D convolution over `[N,C,H,W]` with a square `[O,C,k,k]` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(input) {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(TensorError::shape("conv2d", self.shape(input), self.shape(weight))),
        };
        let (o, k) = match *self.shape(weight) {
            [o, c2, k1, k2] if c2 == c && k1 == k2 => (o, k1),
            _ => return Err(TensorError::shape("conv2d", self.shape(input), self.shape(weight))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::shape("conv2d.bias", self.shape(b), &[o]));
            }
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * o * cols];
        let mut col = vec![T::zero(); rows * cols];
        {
            let x = self.value(input);
            let wv = self.value(weight);
            for s in 0..n {
                kernels::im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom, &mut col);
                let dst = &mut out[s * o * cols..(s + 1) * o * cols];
                if let Some(b) = bias {
                    for (oc, &bv) in self.value(b).iter().enumerate() {
                        dst[oc * cols..(oc + 1) * cols].iter_mut().for_each(|v| *v = bv);
                    }
                }
                kernels::mm_nn(wv, &col, dst, o, rows, cols);
            }
        }
        let shape = vec![n, o, geom.out_h, geom.out_w];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", shape, out, Op::Conv2d { input, weight, bias, geom }, &inputs)
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, hw) = match *self.shape(a) {
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(TensorError::contract("global_avg_pool expects [N,C,H,W]")),
        };
        let x = self.value(a);
        let inv = T::one() / T::of(hw as f64);
        let out = x.chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool(a), &[a])
    }

    // ---- elementwise --------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = dims2("add_row", self.shape(a))?;
        if self.node(row).value.len() != n {
            return Err(TensorError::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self.value(a).chunks_exact(n).flat_map(|line| line.iter().zip(r).map(|(&x, &y)| x + y)).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow(a, row), &[a, row])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// `max(x, 0)`. The backward pass uses slope 1 at exactly zero so that
    /// zero-initialized layers feeding a ReLU can still start learning.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, T::ln, Op::Log(a))
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn acos(&mut self, a: Var) -> Result<Var> {
        self.unary("acos", a, T::acos, Op::Acos(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, T::cos, Op::Cos(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::contract("clamp: lo > hi"));
        }
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    // ---- structure ----------------------------------------------------

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::contract("concat of nothing"))?;
        let (r0, c0) = dims2("concat", self.shape(first))?;
        let mut total = 0;
        for &v in inputs {
            let (r, c) = dims2("concat", self.shape(v))?;
            match axis {
                0 if c == c0 => total += r,
                1 if r == r0 => total += c,
                0 | 1 => return Err(TensorError::shape("concat", self.shape(first), self.shape(v))),
                _ => return Err(TensorError::contract("concat axis must be 0 or 1")),
            }
        }
        let (shape, out) = if axis == 0 {
            let mut out = Vec::with_capacity(total * c0);
            for &v in inputs {
                out.extend_from_slice(self.value(v));
            }
            (vec![total, c0], out)
        } else {
            let mut out = Vec::with_capacity(r0 * total);
            for row in 0..r0 {
                for &v in inputs {
                    let c = self.shape(v)[1];
                    out.extend_from_slice(&self.value(v)[row * c..(row + 1) * c]);
                }
            }
            (vec![r0, total], out)
        };
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a 2-D operand.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice", self.shape(a))?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(TensorError::contract(format!("slice {start}..{end} on axis {axis} of {:?}", self.shape(a))));
        }
        let x = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![end - start, c], x[start * c..end * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * (end - start));
            for row in 0..r {
                out.extend_from_slice(&x[row * c + start..row * c + end]);
            }
            (vec![r, end - start], out)
        };
        self.push("slice", shape, out, Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.node(a).value.len() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a), &[a])
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Scales each row of an `[m,n]` matrix to unit Euclidean norm.
    /// A zero row is a numeric fault.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = dims2("l2_normalize_rows", self.shape(a))?;
        let mut out = Vec::with_capacity(self.node(a).value.len());
        for row in self.value(a).chunks_exact(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) {
                return Err(TensorError::NumericFault { op: "l2_normalize_rows" });
            }
            out.extend(row.iter().map(|&x| x / norm));
        }
        let shape = self.shape(a).to_vec();
        self.push("l2_normalize_rows", shape, out, Op::L2NormalizeRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = dims2("log_softmax_rows", self.shape(a))?;
        let mut out = Vec::with_capacity(self.node(a).value.len());
        for row in self.value(a).chunks_exact(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        let shape = self.shape(a).to_vec();
        self.push("log_softmax_rows", shape, out, Op::LogSoftmaxRows(a), &[a])
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a one-element `loss` node.
    ///
    /// Returns the gradient of every trainable parameter reachable from
    /// `loss`. Gradients are returned rather than stored so callers can keep
    /// several independent accumulators.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(TensorError::contract(format!("backward requires a scalar loss, got shape {:?}", root.shape)));
        }
        let mut out = Gradients::empty(0);
        if !root.needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                out.add_raw(id, &g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.shape(*a))?;
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    kernels::mm_nt(g, self.value(*b), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::mm_tn(self.value(*a), g, db, k, m, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2("transpose", self.shape(*a))?;
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = da[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let n = self.shape(*input)[0];
                let o = self.shape(*weight)[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for s in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                let start = (s * o + oc) * cols;
                                *d = *d + g[start..start + cols].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let x = self.value(*input);
                if self.nodes[weight.0].needs_grad {
                    let mut col = vec![T::zero(); rows * cols];
                    let dw = self.slot(grads, *weight).expect("weight needs grad");
                    for s in 0..n {
                        kernels::im2col(&x[s * in_sz..(s + 1) * in_sz], geom, &mut col);
                        kernels::mm_nt(&g[s * o * cols..(s + 1) * o * cols], &col, dw, o, cols, rows);
                    }
                }
                if self.nodes[input.0].needs_grad {
                    let wv = self.value(*weight);
                    let mut dcol = vec![T::zero(); rows * cols];
                    let dx = self.slot(grads, *input).expect("input needs grad");
                    for s in 0..n {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        kernels::mm_tn(wv, &g[s * o * cols..(s + 1) * o * cols], &mut dcol, rows, o, cols);
                        kernels::col2im(&dcol, geom, &mut dx[s * in_sz..(s + 1) * in_sz]);
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let hw = self.shape(*a)[2] * self.shape(*a)[3];
                let inv = T::one() / T::of(hw as f64);
                if let Some(da) = self.slot(grads, *a) {
                    for (chunk, &gv) in da.chunks_exact_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::axpy(T::one(), g, db);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::axpy(-T::one(), g, db);
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(self.value(*b)) {
                        *d = *d + gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(self.value(*a)) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &den) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv / den;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (((d, &gv), &den), &q) in db.iter_mut().zip(g).zip(bv).zip(y) {
                        *d = *d - gv * q / den;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, da);
                }
                let n = self.nodes[row.0].value.len();
                if let Some(dr) = self.slot(grads, *row) {
                    for line in g.chunks_exact(n) {
                        kernels::axpy(T::one(), line, dr);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::axpy(*c, g, da);
                }
            }
            Op::AddScalar(a, _) | Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, da);
                }
            }
            Op::Relu(a) => self.unary_grad(grads, *a, g, |x, _| if x >= T::zero() { T::one() } else { T::zero() }),
            Op::Sigmoid(a) => self.unary_grad_out(grads, *a, g, y, |s| s * (T::one() - s)),
            Op::Tanh(a) => self.unary_grad_out(grads, *a, g, y, |t| T::one() - t * t),
            Op::Exp(a) => self.unary_grad_out(grads, *a, g, y, |e| e),
            Op::Log(a) => self.unary_grad(grads, *a, g, |x, _| T::one() / x),
            Op::Softplus(a) => self.unary_grad(grads, *a, g, |x, _| sigmoid(x)),
            Op::Acos(a) => self.unary_grad(grads, *a, g, |x, _| -T::one() / (T::one() - x * x).sqrt()),
            Op::Cos(a) => self.unary_grad(grads, *a, g, |x, _| -x.sin()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, *a, g, move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() })
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.nodes[v.0].value.len();
                        if let Some(dv) = self.slot(grads, v) {
                            kernels::axpy(T::one(), &g[offset..offset + len], dv);
                        }
                        offset += len;
                    }
                } else {
                    let total = node.shape[1];
                    let rows = node.shape[0];
                    let mut col0 = 0;
                    for &v in inputs {
                        let c = self.nodes[v.0].shape[1];
                        if let Some(dv) = self.slot(grads, v) {
                            for r in 0..rows {
                                kernels::axpy(T::one(), &g[r * total + col0..r * total + col0 + c], &mut dv[r * c..(r + 1) * c]);
                            }
                        }
                        col0 += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let c = self.shape(*input)[1];
                let (out_r, out_c) = (node.shape[0], node.shape[1]);
                if let Some(da) = self.slot(grads, *input) {
                    if *axis == 0 {
                        kernels::axpy(T::one(), g, &mut da[start * c..(start + out_r) * c]);
                    } else {
                        for r in 0..out_r {
                            kernels::axpy(T::one(), &g[r * out_c..(r + 1) * out_c], &mut da[r * c + start..r * c + start + out_c]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    let s = g[0] / T::of(da.len() as f64);
                    da.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::L2NormalizeRows(a) => {
                let n = node.shape[1];
                let x = self.value(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for ((dr, xr), (yr, gr)) in da.chunks_exact_mut(n).zip(x.chunks_exact(n)).zip(y.chunks_exact(n).zip(g.chunks_exact(n)))
                    {
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + (gv - yv * proj) / norm;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.shape[1];
                if let Some(da) = self.slot(grads, *a) {
                    for ((dr, yr), gr) in da.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + gv - yv.exp() * total;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Elementwise chain rule using the input value: `d += g · f'(x)`.
    fn unary_grad(&self, grads: &mut [Option<Vec<T>>], a: Var, g: &[T], deriv: impl Fn(T, ()) -> T) {
        let x = &self.nodes[a.0].value;
        if let Some(da) = self.slot(grads, a) {
            for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                *d = *d + gv * deriv(xv, ());
            }
        }
    }

    /// Elementwise chain rule using the output value: `d += g · f'(y)`.
    fn unary_grad_out(&self, grads: &mut [Option<Vec<T>>], a: Var, g: &[T], y: &[T], deriv: impl Fn(T) -> T) {
        if let Some(da) = self.slot(grads, a) {
            for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                *d = *d + gv * deriv(yv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(store: &mut ParamStore<f64>, tape: &mut Tape<f64>, name: &str, shape: &[usize], data: Vec<f64>) -> (ParamId, Var) {
        let id = store.add(name, Tensor::new(shape, data).unwrap().with_requires_grad(true)).unwrap();
        (id, tape.param(store, id))
    }

    #[test]
    fn sigmoid_at_zero_and_its_slope() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (id, x) = leaf(&mut store, &mut tape, "x", &[1], vec![0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.item(y), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(id).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&[2], vec![-3.2, 3.2]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 3.2]);
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(&[2, 3], vec![1.0, -2.0, 3.5, 0.25, 8.0, -1.0]).unwrap();
        let i = tape.constant(&Tensor::eye(3));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (id, x) = leaf(&mut store, &mut tape, "x", &[2, 2], vec![1.0, -5.0, 2.0, 0.3]);
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(id).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.input(&[2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.input(&[3], vec![0.0; 3]).unwrap();
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_outputs_are_faults() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&[2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(tape.log(x), Err(TensorError::NumericFault { op: "log" })));
        let z = tape.input(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(tape.l2_normalize_rows(z), Err(TensorError::NumericFault { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (_, x) = leaf(&mut store, &mut tape, "x", &[3], vec![1.0, 2.0, 3.0]);
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn unreachable_and_frozen_params_get_nothing() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (a, xa) = leaf(&mut store, &mut tape, "a", &[2], vec![1.0, 2.0]);
        let (b, _) = leaf(&mut store, &mut tape, "b", &[2], vec![1.0, 2.0]);
        let c = store.add("c", Tensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let xc = tape.param(&store, c);
        let prod = tape.mul(xa, xc).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn detach_cuts_the_path() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (a, x) = leaf(&mut store, &mut tape, "a", &[1], vec![2.0]);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_values() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.input(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(s), &[5.0, 6.0]);
        let r = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(r), &[4, 2]);
        let row = tape.slice(r, 0, 3, 4).unwrap();
        assert_eq!(tape.value(row), &[3.0, 4.0]);
    }
}
