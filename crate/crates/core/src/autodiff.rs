//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and parent references, so creation order is a topological order.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients by
//! summation over fan-out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Log(Var),
    Exp(Var),
    Sum { x: Var, axis: Option<usize> },
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Transpose(Var),
    Index0 { x: Var, index: usize },
    Stack(Vec<Var>),
    MaskFill { x: Var, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Single owner; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Split a shape around `axis` into (outer, n, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64], beta: f64) {
    // SAFETY: callers pass slices sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one image `[cin, h, w]` into columns `[cin*kh*kw, ho*wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, ho: usize, wo: usize, cols: &mut [f64]) {
    let hw = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec, ho: usize, wo: usize, dx: &mut [f64]) {
    let hw = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Add an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::Shape(format!("conv2d input {xs:?} incompatible with kernel {ks:?}")));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::Shape(format!("conv2d bias {:?} needs [{cout}]", self.shape(bv))));
            }
        }
        let (ho, wo) = match (conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"))),
        };
        let spec = ConvSpec { stride, pad };
        let kdim = cin * kh * kw;
        let hw = ho * wo;
        let mut out = vec![0.0; b * cout * hw];
        let mut cols = vec![0.0; kdim * hw];
        {
            let x = &self.nodes[input.0].value.data;
            let k = &self.nodes[kernel.0].value.data;
            let bias_vals = bias.map(|bv| self.nodes[bv.0].value.data.clone());
            for bi in 0..b {
                im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], cin, h, w, kh, kw, spec, ho, wo, &mut cols);
                let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
                if let Some(bv) = &bias_vals {
                    for (co, chunk) in dst.chunks_exact_mut(hw).enumerate() {
                        chunk.fill(bv[co]);
                    }
                }
                gemm(cout, kdim, hw, k, (kdim as isize, 1), &cols, (hw as isize, 1), dst, if bias_vals.is_some() { 1.0 } else { 0.0 });
            }
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(
            Tensor { shape: vec![b, cout, ho, wo], data: out },
            Op::Conv2d { input, kernel, bias, spec },
            &parents,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
        };
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, (k as isize, 1), &self.value(b).data, (n as isize, 1), &mut c, 0.0);
        Ok(self.push(Tensor { shape: vec![m, n], data: c }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, &[x]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::Shape(format!("dot {sa:?} . {sb:?}")));
        }
        let s: f64 = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("{what}: {sb:?} does not match trailing axes of {sa:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.broadcast_check(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.data.len();
        let data = va.data.iter().enumerate().map(|(i, &x)| f(x, vb.data[i % nb])).collect();
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(bad) = v.data.iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument(format!("log of non-positive value {bad}")));
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.ln()).collect(),
        };
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.exp()).collect(),
        };
        self.push(out, Op::Exp(x), &[x])
    }

    /// Sum over one axis (removing it), or over everything when `axis` is `None`.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let v = &self.value(x).data;
        let out = match axis {
            None => Tensor::scalar(v.iter().sum()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape(format!("sum axis {ax} out of range for {shape:?}")));
                }
                let (outer, n, inner) = axis_split(&shape, ax);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            data[o * inner + i] += v[(o * n + j) * inner + i];
                        }
                    }
                }
                let mut s = shape.clone();
                s.remove(ax);
                Tensor { shape: s, data }
            }
        };
        Ok(self.push(out, Op::Sum { x, axis }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * c).collect(),
        };
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a + c).collect(),
        };
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let data = self.value(x).data.clone();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Transpose of a 2D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x), &[x]))
    }

    /// Select `x[index]` along the first axis.
    pub fn index0(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(Error::Shape(format!("index {index} out of range for {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data[index * inner..(index + 1) * inner].to_vec();
        Ok(self.push(Tensor { shape: s[1..].to_vec(), data }, Op::Index0 { x, index }, &[x]))
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let s = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * s.iter().product::<usize>());
        for &x in xs {
            if self.shape(x) != s.as_slice() {
                return Err(Error::Shape(format!("stack: {:?} vs {s:?}", self.shape(x))));
            }
            data.extend_from_slice(&self.value(x).data);
        }
        let mut shape = vec![xs.len()];
        shape.extend(s);
        Ok(self.push(Tensor { shape, data }, Op::Stack(xs.to_vec()), xs))
    }

    /// Replace masked entries with `value`; masked entries pass no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::Shape(format!("mask of {} for {} values", mask.len(), v.numel())));
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(mask).map(|(&a, &m)| if m { value } else { a }).collect(),
        };
        Ok(self.push(out, Op::MaskFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// Reverse pass from a scalar node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d { input, kernel, bias, spec } => {
                    let (xs, ks) = (val(*input).shape.clone(), val(*kernel).shape.clone());
                    let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (ho, wo) = (node.value.shape[2], node.value.shape[3]);
                    let (kdim, hw) = (cin * kh * kw, ho * wo);
                    let x = &val(*input).data;
                    let k = &val(*kernel).data;
                    let mut cols = vec![0.0; kdim * hw];
                    let mut dcols = vec![0.0; kdim * hw];
                    let mut dk = vec![0.0; cout * kdim];
                    let mut dx = if wants(*input) { vec![0.0; x.len()] } else { Vec::new() };
                    for bi in 0..b {
                        let gout = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
                        if wants(*kernel) {
                            im2col(xb, cin, h, w, kh, kw, *spec, ho, wo, &mut cols);
                            // dK += gout [cout, hw] x cols^T [hw, kdim]
                            gemm(cout, hw, kdim, gout, (hw as isize, 1), &cols, (1, hw as isize), &mut dk, 1.0);
                        }
                        if wants(*input) {
                            // dcols = K^T [kdim, cout] x gout [cout, hw]
                            gemm(kdim, cout, hw, k, (1, kdim as isize), gout, (hw as isize, 1), &mut dcols, 0.0);
                            col2im(&dcols, cin, h, w, kh, kw, *spec, ho, wo, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
                        }
                    }
                    if wants(*kernel) {
                        add_into(acc(&mut grads, *kernel, dk.len()), &dk);
                    }
                    if wants(*input) {
                        add_into(acc(&mut grads, *input, dx.len()), &dx);
                    }
                    if let Some(bv) = bias {
                        if wants(*bv) {
                            let mut db = vec![0.0; cout];
                            for bi in 0..b {
                                for (co, d) in db.iter_mut().enumerate() {
                                    let base = (bi * cout + co) * hw;
                                    *d += g[base..base + hw].iter().sum::<f64>();
                                }
                            }
                            add_into(acc(&mut grads, *bv, cout), &db);
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &val(*x).data;
                    let d: Vec<f64> = g.iter().zip(xv).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect();
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if wants(*a) {
                        // dA = G [m,n] x B^T [n,k]
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n as isize, 1), &val(*b).data, (1, n as isize), &mut da, 0.0);
                        add_into(acc(&mut grads, *a, da.len()), &da);
                    }
                    if wants(*b) {
                        // dB = A^T [k,m] x G [m,n]
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &val(*a).data, (1, k as isize), &g, (n as isize, 1), &mut db, 0.0);
                        add_into(acc(&mut grads, *b, db.len()), &db);
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value.data;
                    let (outer, n, inner) = axis_split(&node.value.shape, *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let id = |j: usize| (o * n + j) * inner + i;
                            let inner_prod: f64 = (0..n).map(|j| g[id(j)] * y[id(j)]).sum();
                            for j in 0..n {
                                d[id(j)] = y[id(j)] * (g[id(j)] - inner_prod);
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    if wants(*a) {
                        let d: Vec<f64> = val(*b).data.iter().map(|v| v * g0).collect();
                        add_into(acc(&mut grads, *a, d.len()), &d);
                    }
                    if wants(*b) {
                        let d: Vec<f64> = val(*a).data.iter().map(|v| v * g0).collect();
                        add_into(acc(&mut grads, *b, d.len()), &d);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if wants(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if wants(*b) {
                        let nb = val(*b).numel();
                        let gb = acc(&mut grads, *b, nb);
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % nb] += sign * gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&val(*a).data, &val(*b).data);
                    let nb = vb.len();
                    if wants(*a) {
                        let d: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * vb[i % nb]).collect();
                        add_into(acc(&mut grads, *a, d.len()), &d);
                    }
                    if wants(*b) {
                        let gb = acc(&mut grads, *b, nb);
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % nb] += gi * va[i];
                        }
                    }
                }
                Op::Log(x) => {
                    let d: Vec<f64> = g.iter().zip(&val(*x).data).map(|(gi, xi)| gi / xi).collect();
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
                Op::Exp(x) => {
                    let d: Vec<f64> = g.iter().zip(&node.value.data).map(|(gi, yi)| gi * yi).collect();
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
                Op::Sum { x, axis } => {
                    let shape = val(*x).shape.clone();
                    let n_in = val(*x).numel();
                    let gx = acc(&mut grads, *x, n_in);
                    match axis {
                        None => gx.iter_mut().for_each(|v| *v += g[0]),
                        Some(ax) => {
                            let (outer, n, inner) = axis_split(&shape, *ax);
                            for o in 0..outer {
                                for j in 0..n {
                                    for i in 0..inner {
                                        gx[(o * n + j) * inner + i] += g[o * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    add_into(acc(&mut grads, *x, g.len()), &g);
                }
                Op::Transpose(x) => {
                    let s = &val(*x).shape;
                    let (r, c) = (s[0], s[1]);
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Index0 { x, index } => {
                    let n_in = val(*x).numel();
                    let inner = g.len();
                    let gx = acc(&mut grads, *x, n_in);
                    add_into(&mut gx[index * inner..(index + 1) * inner], &g);
                }
                Op::Stack(xs) => {
                    let inner = g.len() / xs.len();
                    for (k, x) in xs.iter().enumerate() {
                        if wants(*x) {
                            add_into(acc(&mut grads, *x, inner), &g[k * inner..(k + 1) * inner]);
                        }
                    }
                }
                Op::MaskFill { x, mask } => {
                    let d: Vec<f64> = g.iter().zip(mask).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect();
                    add_into(acc(&mut grads, *x, d.len()), &d);
                }
            }
        }
        // keep only leaf gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Relative error `|a-b| / max(1e-8, |a|+|b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Builds a differentiable function of the given inputs inside a graph.
pub type GraphFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Compare reverse-mode gradients of `f` against central differences with
/// step `h`. `f` may return a non-scalar; it is reduced with fixed random
/// weights so every output element contributes.
pub fn check_gradients(name: &str, f: &GraphFn<'_>, inputs: &[Tensor], h: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> Result<(Graph, Var, Vec<Var>, Tensor)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => Tensor::zeros(g.shape(out).to_vec()),
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod, None)?;
        Ok((g, loss, vars, w))
    };
    // probe the output shape, then draw the projection weights
    let (probe, _, _, zero_w) = eval(inputs, None)?;
    drop(probe);
    let weights = Tensor::from_fn(zero_w.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
    let (g, loss, vars, _) = eval(inputs, Some(&weights))?;
    let grads = g.backward(loss)?;

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data[e] -= h;
            let (gp, lp, _, _) = eval(&plus, Some(&weights))?;
            let (gm, lm, _, _) = eval(&minus, Some(&weights))?;
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            max_rel_err = max_rel_err.max(relative_error(analytic[e], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err,
        checked,
    })
}

/// Names of the operators covered by [`grad_check`].
pub const CHECKED_OPS: &[&str] = &[
    "conv2d", "relu", "matmul", "softmax", "dot", "add", "sub", "mul", "log", "exp", "sum", "scale",
    "add_scalar", "reshape", "transpose", "index0", "stack", "mask_fill", "log_softmax",
];

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero (for ops with a kink there).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Finite-difference check of one registered operator on random shapes
/// (no larger than 4x4x3x3) drawn from `seed`.
pub fn grad_check(op: &str, seed: u64) -> Result<GradCheckReport> {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (d0, d1, d2) = (dim(1, 4), dim(2, 4), dim(1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let unit = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, -1.0, 1.0);
    match op {
        "conv2d" => {
            let (b, cin, cout) = (dim_from(&mut rng, 1, 2), dim_from(&mut rng, 1, 3), dim_from(&mut rng, 1, 4));
            let k = dim_from(&mut rng, 1, 3);
            let stride = dim_from(&mut rng, 1, 2);
            let pad = dim_from(&mut rng, 0, 1);
            let side = dim_from(&mut rng, k.max(3), 5);
            let inputs = vec![
                unit(&mut rng, &[b, cin, side, side]),
                unit(&mut rng, &[cout, cin, k, k]),
                unit(&mut rng, &[cout]),
            ];
            let f = move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            check_gradients(op, &f, &inputs, H, seed)
        }
        "relu" => {
            let inputs = vec![away_from_zero(&mut rng, &[d0, d1, 3, 3])];
            check_gradients(op, &|g, v| Ok(g.relu(v[0])), &inputs, H, seed)
        }
        "matmul" => {
            let inputs = vec![unit(&mut rng, &[d0, d1]), unit(&mut rng, &[d1, d2])];
            check_gradients(op, &|g, v| g.matmul(v[0], v[1]), &inputs, H, seed)
        }
        "softmax" => {
            let axis = dim_from(&mut rng, 0, 1);
            let inputs = vec![random_tensor(&mut rng, &[d0 + 1, d1], -2.0, 2.0)];
            check_gradients(op, &move |g, v| g.softmax(v[0], axis), &inputs, H, seed)
        }
        "dot" => {
            let inputs = vec![unit(&mut rng, &[d1 + 2]), unit(&mut rng, &[d1 + 2])];
            check_gradients(op, &|g, v| g.dot(v[0], v[1]), &inputs, H, seed)
        }
        "add" | "sub" | "mul" => {
            let inputs = vec![unit(&mut rng, &[d0, d1]), unit(&mut rng, &[d1])];
            let f = move |g: &mut Graph, v: &[Var]| match op {
                "add" => g.add(v[0], v[1]),
                "sub" => g.sub(v[0], v[1]),
                _ => g.mul(v[0], v[1]),
            };
            check_gradients(op, &f, &inputs, H, seed)
        }
        "log" => {
            let inputs = vec![random_tensor(&mut rng, &[d0, d1], 0.2, 2.0)];
            check_gradients(op, &|g, v| g.log(v[0]), &inputs, H, seed)
        }
        "exp" => {
            let inputs = vec![unit(&mut rng, &[d0, d1])];
            check_gradients(op, &|g, v| Ok(g.exp(v[0])), &inputs, H, seed)
        }
        "sum" => {
            let axis = [None, Some(0), Some(1), Some(2)][dim_from(&mut rng, 0, 3)];
            let inputs = vec![unit(&mut rng, &[d0, d1, d2])];
            check_gradients(op, &move |g, v| g.sum(v[0], axis), &inputs, H, seed)
        }
        "scale" => {
            let c = rng.gen_range(-2.0..2.0);
            let inputs = vec![unit(&mut rng, &[d0, d1])];
            check_gradients(op, &move |g, v| Ok(g.scale(v[0], c)), &inputs, H, seed)
        }
        "add_scalar" => {
            let c = rng.gen_range(-2.0..2.0);
            let inputs = vec![unit(&mut rng, &[d0, d1])];
            check_gradients(op, &move |g, v| Ok(g.add_scalar(v[0], c)), &inputs, H, seed)
        }
        "reshape" => {
            let inputs = vec![unit(&mut rng, &[d0, d1])];
            check_gradients(op, &move |g, v| g.reshape(v[0], [d0 * d1]), &inputs, H, seed)
        }
        "transpose" => {
            let inputs = vec![unit(&mut rng, &[d0, d1])];
            check_gradients(op, &|g, v| g.transpose(v[0]), &inputs, H, seed)
        }
        "index0" => {
            let i = dim_from(&mut rng, 0, d0 - 1);
            let inputs = vec![unit(&mut rng, &[d0, d1, d2])];
            check_gradients(op, &move |g, v| g.index0(v[0], i), &inputs, H, seed)
        }
        "stack" => {
            let inputs = vec![unit(&mut rng, &[d1]), unit(&mut rng, &[d1]), unit(&mut rng, &[d1])];
            check_gradients(op, &|g, v| g.stack(v), &inputs, H, seed)
        }
        "mask_fill" => {
            let n = d0 * d1 + 1;
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let inputs = vec![unit(&mut rng, &[n])];
            check_gradients(op, &move |g, v| g.mask_fill(v[0], &mask, -3.0), &inputs, H, seed)
        }
        "log_softmax" => {
            let inputs = vec![random_tensor(&mut rng, &[d1 + 2], -2.0, 2.0)];
            let f = |g: &mut Graph, v: &[Var]| {
                let s = g.softmax(v[0], 0)?;
                g.log(s)
            };
            check_gradients(op, &f, &inputs, H, seed)
        }
        other => Err(Error::InvalidArgument(format!("unknown operator {other:?}"))),
    }
}

fn dim_from(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}
