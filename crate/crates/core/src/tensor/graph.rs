use super::ops::{self, Padding};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(Binary, usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRowBias(usize, usize),
    Sigmoid(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, T, T),
    Softmax(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
    Stack(Vec<usize>),
    Select(usize, usize),
    Crop(usize, usize, usize),
    Bilinear(usize),
    AvgPool(usize, usize),
    Conv2d(usize, usize, usize),
    Filter(usize, Tensor<T>, Padding),
    Subsample(usize),
    LayerNorm(usize, Vec<T>),
    BatchNorm(usize, Vec<T>),
    ChannelAffine(usize, usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Values are computed eagerly;
/// [`Graph::backward`] walks the tape in reverse.
///
/// A graph built with [`Graph::inference`] never records inputs, so nothing
/// computed on it can receive gradients.
#[derive(Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, grads: Vec::new() }
    }

    /// A graph with gradient recording disabled.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, grads: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. `requires_grad` is ignored on inference graphs.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.val(a))?;
        Ok(self.push(out, Op::Transpose(a.0), &[a.0]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        let shape = if x.shape() == y.shape() || y.len() == 1 {
            x.shape().to_vec()
        } else if x.len() == 1 {
            y.shape().to_vec()
        } else {
            return Err(shape_err!("{kind:?} of {:?} and {:?}", x.shape(), y.shape()));
        };
        let n = x.len().max(y.len());
        let (xs, ys) = (x.data(), y.data());
        let get = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
        let data = (0..n)
            .map(|i| {
                let (p, q) = (get(xs, i), get(ys, i));
                match kind {
                    Binary::Add => p + q,
                    Binary::Sub => p - q,
                    Binary::Mul => p * q,
                    Binary::Div => p / q,
                }
            })
            .collect();
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out = Tensor::new(shape, data)?.ensure_finite(name)?;
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise sum; equal shapes or one side a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.val(a).map(f).ensure_finite(name)?;
        Ok(self.push(out, op, &[a.0]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, "scale", |v| v * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, "add_scalar", |v| v + s, Op::AddScalar(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", ops::sigmoid, Op::Sigmoid(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", ops::gelu, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |v| v.exp(), Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "ln", |v| v.ln(), Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", |v| v.abs(), Op::Abs(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", |v| v.sqrt(), Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |v| v * v, Op::Square(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(a, "clamp", |v| v.max(lo).min(hi), Op::Clamp(a.0, lo, hi))
    }

    /// `x[M×N] + b[N]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.val(x).matrix_dims()?;
        if self.val(b).len() != n {
            return Err(shape_err!("row bias {:?} for {m}x{n}", self.val(b).shape()));
        }
        let bias = self.val(b).data();
        let data = self.val(x).data().chunks(n).flat_map(|r| r.iter().zip(bias).map(|(&v, &c)| v + c)).collect();
        let out = Tensor::new(vec![m, n], data)?.ensure_finite("add_row_bias")?;
        Ok(self.push(out, Op::AddRowBias(x.0, b.0), &[x.0, b.0]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.val(a), axis)?;
        Ok(self.push(out, Op::Softmax(a.0, axis), &[a.0]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).sum()).ensure_finite("sum")?;
        Ok(self.push(out, Op::Sum(a.0), &[a.0]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).mean()).ensure_finite("mean")?;
        Ok(self.push(out, Op::Mean(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.val(a).matrix_dims()?;
        if start >= end || end > n {
            return Err(shape_err!("columns {start}..{end} of {m}x{n}"));
        }
        let data = self.val(a).data().chunks(n).flat_map(|r| r[start..end].iter().copied()).collect();
        let out = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(a.0, start), &[a.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.val(p).matrix_dims()?.0,
            None => return Err(shape_err!("concat of nothing")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.val(p).matrix_dims()?;
            if pm != m {
                return Err(shape_err!("concat_cols row mismatch {pm} vs {m}"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.val(a).matrix_dims()?;
        if start >= end || end > m {
            return Err(shape_err!("rows {start}..{end} of {m}x{n}"));
        }
        let out = Tensor::new(vec![end - start, n], self.val(a).data()[start * n..end * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a.0, start), &[a.0]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.val(p).matrix_dims()?.1,
            None => return Err(shape_err!("concat of nothing")),
        };
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.val(p).matrix_dims()?;
            if pn != n {
                return Err(shape_err!("concat_rows column mismatch {pn} vs {n}"));
            }
            m += pm;
        }
        let data = parts.iter().flat_map(|&p| self.val(p).data().iter().copied()).collect();
        let out = Tensor::new(vec![m, n], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let out = ops::stack(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::Stack(ids.clone()), &ids))
    }

    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let out = ops::select(self.val(a), index)?;
        Ok(self.push(out, Op::Select(a.0, index), &[a.0]))
    }

    pub fn crop2d(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = ops::crop2d(self.val(a), y0, x0, h, w)?;
        Ok(self.push(out, Op::Crop(a.0, y0, x0), &[a.0]))
    }

    pub fn bilinear_resize(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.val(a), h, w)?;
        Ok(self.push(out, Op::Bilinear(a.0), &[a.0]))
    }

    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.val(a), k)?;
        Ok(self.push(out, Op::AvgPool(a.0, k), &[a.0]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv2d(self.val(x), self.val(w), self.val(b))?;
        Ok(self.push(out, Op::Conv2d(x.0, w.0, b.0), &[x.0, w.0, b.0]))
    }

    /// Fixed (non-learnable) kernel applied to every plane.
    pub fn filter2d(&mut self, x: Var, kernel: &Tensor<T>, padding: Padding) -> Result<Var> {
        let out = ops::filter2d(self.val(x), kernel, padding)?;
        Ok(self.push(out, Op::Filter(x.0, kernel.clone(), padding), &[x.0]))
    }

    pub fn subsample2(&mut self, x: Var) -> Result<Var> {
        let out = ops::subsample2(self.val(x))?;
        Ok(self.push(out, Op::Subsample(x.0), &[x.0]))
    }

    /// Per-row standardization of a matrix (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (out, inv) = ops::layer_norm_rows(self.val(x), eps)?;
        Ok(self.push(out, Op::LayerNorm(x.0, inv), &[x.0]))
    }

    /// Per-channel standardization over batch and spatial axes.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (out, inv) = ops::batch_norm(self.val(x), eps)?;
        Ok(self.push(out, Op::BatchNorm(x.0, inv), &[x.0]))
    }

    /// `x·γ[c] + β[c]` per channel of an image tensor.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, h, w) = self.val(x).image_dims()?;
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(shape_err!("channel affine for {c} channels"));
        }
        let (g, be) = (self.val(gamma).data(), self.val(beta).data());
        let hw = h * w;
        let xs = self.val(x).data();
        let data = (0..b * c * hw)
            .map(|i| {
                let ch = (i / hw) % c;
                xs[i] * g[ch] + be[ch]
            })
            .collect();
        let out = Tensor::new(self.val(x).shape().to_vec(), data)?.ensure_finite("channel_affine")?;
        Ok(self.push(out, Op::ChannelAffine(x.0, gamma.0, beta.0), &[x.0, gamma.0, beta.0]))
    }

    /// Reverse pass from a scalar loss. Populates gradients on every
    /// `requires_grad` leaf; frozen leaves keep no gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar of shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Contract("backward from a value with no recorded graph".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let buf = g.clone().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.set_grad(buf);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let value = &nodes[id].value;
        let mut acc = |target: usize, contribution: Vec<T>| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let input = |i: usize| &nodes[i].value;
        let pointwise = |i: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            input(i).data().iter().zip(value.data()).zip(g).map(|((&x, &y), &d)| f(x, y, d)).collect()
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = input(*a).matrix_dims().expect("matrix");
                let n = input(*b).shape()[1];
                acc(*a, ops::matmul_nt(g, input(*b).data(), m, n, k));
                acc(*b, ops::matmul_tn(input(*a).data(), g, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = input(*a).matrix_dims().expect("matrix");
                acc(*a, ops::transpose_raw(g, n, m));
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (input(*a).data(), input(*b).data());
                let get = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
                let (mut ga, mut gb) = (vec![T::zero(); xa.len()], vec![T::zero(); xb.len()]);
                for (i, &d) in g.iter().enumerate() {
                    let (p, q) = (get(xa, i), get(xb, i));
                    let (da, db) = match kind {
                        Binary::Add => (d, d),
                        Binary::Sub => (d, -d),
                        Binary::Mul => (d * q, d * p),
                        Binary::Div => (d / q, -d * p / (q * q)),
                    };
                    ga[if xa.len() == 1 { 0 } else { i }] += da;
                    gb[if xb.len() == 1 { 0 } else { i }] += db;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::AddRowBias(x, b) => {
                let n = input(*b).len();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (o, &d) in gb.iter_mut().zip(row) {
                        *o += d;
                    }
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::Sigmoid(a) => acc(*a, pointwise(*a, &|_, y, d| d * y * (T::one() - y))),
            Op::Gelu(a) => acc(*a, pointwise(*a, &|x, _, d| d * ops::gelu_derivative(x))),
            Op::Exp(a) => acc(*a, pointwise(*a, &|_, y, d| d * y)),
            Op::Ln(a) => acc(*a, pointwise(*a, &|x, _, d| d / x)),
            Op::Abs(a) => acc(
                *a,
                pointwise(*a, &|x, _, d| {
                    if x > T::zero() {
                        d
                    } else if x < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Sqrt(a) => acc(*a, pointwise(*a, &|_, y, d| d / (y + y))),
            Op::Square(a) => acc(*a, pointwise(*a, &|x, _, d| d * (x + x))),
            Op::Clamp(a, lo, hi) => {
                acc(*a, pointwise(*a, &|x, _, d| if x >= *lo && x <= *hi { d } else { T::zero() }))
            }
            Op::Softmax(a, axis) => acc(*a, ops::softmax_backward(value, g, *axis).expect("validated")),
            Op::Sum(a) => acc(*a, vec![g[0]; input(*a).len()]),
            Op::Mean(a) => {
                let n = input(*a).len();
                acc(*a, vec![g[0] / T::from_usize_exact(n); n])
            }
            Op::SliceCols(a, start) => {
                let (m, n) = input(*a).matrix_dims().expect("matrix");
                let w = value.shape()[1];
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let n = value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, w) = input(p).matrix_dims().expect("matrix");
                    let gp = (0..m).flat_map(|r| g[r * n + offset..r * n + offset + w].iter().copied()).collect();
                    acc(p, gp);
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = value.shape()[1];
                let mut ga = vec![T::zero(); input(*a).len()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::ConcatRows(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = input(p).len();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Select(a, index) => {
                let mut ga = vec![T::zero(); input(*a).len()];
                ga[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::Crop(a, y0, x0) => {
                let (_, _, ih, iw) = input(*a).image_dims().expect("image");
                let r = value.rank();
                let (h, w) = (value.shape()[r - 2], value.shape()[r - 1]);
                let planes = value.len() / (h * w);
                let mut ga = vec![T::zero(); input(*a).len()];
                for plane in 0..planes {
                    for y in 0..h {
                        let dst = plane * ih * iw + (y0 + y) * iw + x0;
                        let src = (plane * h + y) * w;
                        ga[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                acc(*a, ga);
            }
            Op::Bilinear(a) => {
                let r = value.rank();
                let (h, w) = (value.shape()[r - 2], value.shape()[r - 1]);
                acc(*a, ops::bilinear_resize_backward(input(*a).shape(), g, h, w));
            }
            Op::AvgPool(a, k) => acc(*a, ops::avg_pool2d_backward(input(*a).shape(), g, *k)),
            Op::Conv2d(x, w, b) => {
                let (gx, gw, gb) = ops::conv2d_backward(input(*x), input(*w), g);
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Filter(x, kernel, padding) => {
                acc(*x, ops::filter2d_backward(input(*x).shape(), kernel, *padding, g))
            }
            Op::Subsample(x) => acc(*x, ops::subsample2_backward(input(*x).shape(), g)),
            Op::LayerNorm(x, inv) => acc(*x, ops::layer_norm_rows_backward(value, inv, g)),
            Op::BatchNorm(x, inv) => acc(*x, ops::batch_norm_backward(value, inv, g)),
            Op::ChannelAffine(x, gamma, beta) => {
                let (_, c, h, w) = input(*x).image_dims().expect("image");
                let hw = h * w;
                let (xs, gs) = (input(*x).data(), input(*gamma).data());
                let mut gx = vec![T::zero(); xs.len()];
                let (mut gg, mut gbeta) = (vec![T::zero(); c], vec![T::zero(); c]);
                for (i, &d) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    gx[i] = d * gs[ch];
                    gg[ch] += d * xs[i];
                    gbeta[ch] += d;
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.value(x).grad().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_and_frozen_leaf_none() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        let y = g.leaf(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap(), true);
        let frozen = g.leaf(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap(), false);
        let p = g.mul(y, frozen).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.value(x).grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(g.value(y).grad().unwrap(), &[1.0, 1.0]);
        assert!(g.value(frozen).grad().is_none());
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.square(x).unwrap();
        assert!(!g.requires_grad(y));
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let s = g.constant(Tensor::scalar(2.0));
        assert!(g.mul(a, s).is_ok());
    }

    #[test]
    fn annihilation_and_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[1.5, -2.0, 7.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[3]).unwrap());
        let p = g.mul(x, z).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        let s = g.add(x, z).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
    }

    #[test]
    fn non_finite_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
        assert!(matches!(g.ln(x), Err(Error::NonFinite("ln"))));
    }
}
