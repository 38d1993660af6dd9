//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//! Leaves may borrow their values (model parameters are never copied onto the
//! tape), so a tape lives only as long as the parameters it was built from.
//!
//! Binary element-wise operations follow NumPy broadcasting; gradients are
//! summed back to the operand shape.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{s, Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of a strided 2-D patch extraction (`im2col`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let h = height + 2 * self.padding;
        let w = width + 2 * self.padding;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (h - self.kernel) / self.stride + 1,
            (w - self.kernel) / self.stride + 1,
        ))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    NormalCdf(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Im2Col(Var, PatchGeometry),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Registers a named parameter leaf. Repeated registrations of the same
    /// name return the existing leaf so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, value: &'a Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Cow::Borrowed(value), Op::Leaf, trainable);
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Scalar counterpart of [`Tape::param`].
    pub fn scalar_param(&mut self, name: &str, value: f64, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(
            Cow::Owned(ArrayD::from_elem(IxDyn(&[]), value)),
            Op::Leaf,
            trainable,
        );
        self.params.insert(name.to_owned(), v);
        v
    }

    /// Named parameter leaves registered on this tape.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1, "scalar_value on tensor of shape {:?}", t.shape());
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- element-wise binary -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.owned(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        self.owned(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.owned(y, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) / self.value(b);
        self.owned(y, Op::Div(a, b), &[a, b])
    }

    // ---- element-wise unary --------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| -x);
        self.owned(y, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) * c;
        self.owned(y, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) + c;
        self.owned(y, Op::Offset(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        self.owned(y, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::ln);
        self.owned(y, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::sqrt);
        self.owned(y, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * x);
        self.owned(y, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::abs);
        self.owned(y, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(sigmoid);
        self.owned(y, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        self.owned(y, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(softplus);
        self.owned(y, Op::Softplus(a), &[a])
    }

    /// Standard normal cumulative distribution function.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(normal_cdf);
        self.owned(y, Op::NormalCdf(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * normal_cdf(x));
        self.owned(y, Op::Gelu(a), &[a])
    }

    // ---- linear algebra and shape ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = {
            let av = as_2d(self.value(a));
            let bv = as_2d(self.value(b));
            assert_eq!(
                av.ncols(),
                bv.nrows(),
                "matmul shape mismatch {:?} x {:?}",
                av.shape(),
                bv.shape()
            );
            av.dot(&bv).into_dyn()
        };
        self.owned(y, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = as_2d(self.value(a)).t().as_standard_layout().into_owned().into_dyn();
        self.owned(y, Op::Transpose(a), &[a])
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.owned(y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let y = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.owned(y, Op::SumAxis(a), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(
            src.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            src.shape(),
            shape
        );
        let y = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        self.owned(y, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let y = {
            let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shapes")
        };
        self.owned(y, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Rows/columns `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let y = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.owned(y, Op::Slice(a, axis, start), &[a])
    }

    /// Unfolds a `[C, H, W]` tensor into `[C*k*k, Ho*Wo]` patch columns.
    pub fn im2col(&mut self, a: Var, geom: PatchGeometry) -> Var {
        let y = im2col(self.value(a), geom);
        self.owned(y, Op::Im2Col(a, geom), &[a])
    }

    // ---- composites ------------------------------------------------------------

    /// Row-wise softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let last = self.shape(a).len() - 1;
        let shift = self
            .value(a)
            .map_axis(Axis(last), |row| row.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .insert_axis(Axis(last));
        let shift = self.constant(shift);
        let centered = self.sub(a, shift);
        let e = self.exp(centered);
        let z = self.sum_axis(e, last);
        self.div(e, z)
    }

    /// Softmax over every element of a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shift = self.value(a).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let centered = self.offset(a, -shift);
        let e = self.exp(centered);
        let z = self.sum(e);
        self.div(e, z)
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let last = self.shape(a).len() - 1;
        let mean = self.mean_axis(a, last);
        let centered = self.sub(a, mean);
        let sq = self.square(centered);
        let var = self.mean_axis(sq, last);
        let var = self.offset(var, eps);
        let std = self.sqrt(var);
        let normed = self.div(centered, std);
        let scaled = self.mul(normed, gain);
        self.add(scaled, bias)
    }

    /// `x @ w^T + b` for row-major activations `x: [n, in]`, `w: [out, in]`.
    pub fn linear_rows(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let wt = self.transpose(weight);
        let y = self.matmul(x, wt);
        match bias {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    // ---- reverse pass ----------------------------------------------------------

    /// Back-propagates from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(ArrayD::ones(self.shape(output)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let shaped = reduce_to(contribution, self.shape(target));
        match &mut grads[target.0] {
            Some(existing) => *existing += &shaped,
            slot @ None => *slot = Some(shaped),
        }
    }

    fn propagate(&self, idx: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, &g * bv);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, &g * av);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, &g / bv);
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -a/b^2 = -y/b
                    let gb = -(&g * y) / bv;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, -g),
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Offset(a) => self.accumulate(grads, *a, g),
            Op::Exp(a) => self.accumulate(grads, *a, g * y),
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g / x)
            }
            Op::Sqrt(a) => {
                let d = y.mapv(|r| 0.5 / r.max(f64::MIN_POSITIVE));
                self.accumulate(grads, *a, g * d)
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g * x * 2.0)
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let sign = x.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g * sign)
            }
            Op::Sigmoid(a) => {
                let d = y.mapv(|s| s * (1.0 - s));
                self.accumulate(grads, *a, g * d)
            }
            Op::Tanh(a) => {
                let d = y.mapv(|t| 1.0 - t * t);
                self.accumulate(grads, *a, g * d)
            }
            Op::Softplus(a) => {
                let d = self.value(*a).mapv(sigmoid);
                self.accumulate(grads, *a, g * d)
            }
            Op::NormalCdf(a) => {
                let d = self.value(*a).mapv(normal_pdf);
                self.accumulate(grads, *a, g * d)
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(|x| normal_cdf(x) + x * normal_pdf(x));
                self.accumulate(grads, *a, g * d)
            }
            Op::MatMul(a, b) => {
                let g2 = as_2d(&g);
                if self.requires_grad(*a) {
                    let bv = as_2d(self.value(*b));
                    self.accumulate(grads, *a, g2.dot(&bv.t()).into_dyn());
                }
                if self.requires_grad(*b) {
                    let av = as_2d(self.value(*a));
                    self.accumulate(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::Transpose(a) => {
                let gt = as_2d(&g).t().as_standard_layout().into_owned().into_dyn();
                self.accumulate(grads, *a, gt)
            }
            Op::Sum(a) => {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, ArrayD::from_elem(IxDyn(&shape), gs))
            }
            Op::SumAxis(a) => {
                let shape = self.shape(*a).to_vec();
                let expanded = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis gradient broadcast")
                    .to_owned();
                self.accumulate(grads, *a, expanded)
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let back = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape gradient");
                self.accumulate(grads, *a, back)
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let piece = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        self.accumulate(grads, p, piece);
                    }
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let shape = self.shape(*a).to_vec();
                let mut full = ArrayD::zeros(IxDyn(&shape));
                let len = g.shape()[*axis];
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(&g);
                self.accumulate(grads, *a, full)
            }
            Op::Im2Col(a, geom) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, col2im(&g, &shape, *geom))
            }
        }
    }
}

fn as_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a 2-D tensor, got shape {:?}", t.shape()))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(mut g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

pub(crate) fn im2col(input: &Tensor, geom: PatchGeometry) -> Tensor {
    let shape = input.shape();
    assert_eq!(shape.len(), 3, "im2col expects [C, H, W], got {shape:?}");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = geom
        .output_size(h, w)
        .unwrap_or_else(|| panic!("input {h}x{w} smaller than kernel {}", geom.kernel));
    let k = geom.kernel;
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((c * k * k, oh * ow));
    let pad = geom.padding as isize;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let mut dst = out.slice_mut(s![row, ..]);
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = src[base + ix as usize];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn col2im(cols: &Tensor, shape: &[usize], geom: PatchGeometry) -> Tensor {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = geom.output_size(h, w).expect("geometry validated forward");
    let k = geom.kernel;
    let cols = as_2d(cols);
    let mut out = vec![0.0; c * h * w];
    let pad = geom.padding as isize;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ch * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[base + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("col2im shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array3};

    fn fd_check<F>(x0: &Tensor, f: F)
    where
        F: Fn(&mut Tape<'_>, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param("x", x0, true);
        let y = f(&mut tape, x);
        let y = tape.sum(y);
        let grads = tape.backward(y);
        let analytic = grads.get(x).expect("gradient").clone();

        let h = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = x0.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let eval = |t: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.constant(t.clone());
                let y = f(&mut tape, x);
                tape.value(y).sum()
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = arr2(&[[0.3, -1.2], [2.0, 0.7]]).into_dyn();
        fd_check(&x, |t, v| t.exp(v));
        fd_check(&x, |t, v| t.gelu(v));
        fd_check(&x, |t, v| t.sigmoid(v));
        fd_check(&x, |t, v| t.tanh(v));
        fd_check(&x, |t, v| t.softplus(v));
        fd_check(&x, |t, v| t.normal_cdf(v));
        fd_check(&x, |t, v| t.abs(v));
        fd_check(&x, |t, v| {
            let sq = t.square(v);
            let p = t.offset(sq, 1.0);
            let r = t.sqrt(p);
            t.ln(r)
        });
    }

    #[test]
    fn broadcast_gradients_reduce_to_operand_shape() {
        let x = arr2(&[[0.3, -1.2, 0.5], [2.0, 0.7, -0.1]]).into_dyn();
        let row = arr1(&[1.0, 2.0, 3.0]).into_dyn();
        fd_check(&x, |t, v| {
            let r = t.constant(row.clone());
            let p = t.mul(v, r);
            t.div(p, r)
        });
        fd_check(&row, |t, v| {
            let m = t.constant(x.clone());
            let q = t.div(m, v);
            t.mul(q, q)
        });
    }

    #[test]
    fn structural_gradients() {
        let x = arr2(&[[0.3, -1.2, 0.5], [2.0, 0.7, -0.1]]).into_dyn();
        let w = arr2(&[[0.5, 1.0], [-1.0, 0.25], [2.0, 0.1]]).into_dyn();
        fd_check(&x, |t, v| {
            let wv = t.constant(w.clone());
            let m = t.matmul(v, wv);
            t.square(m)
        });
        fd_check(&x, |t, v| {
            let tr = t.transpose(v);
            let s = t.slice(tr, 0, 1, 3);
            let r = t.reshape(s, &[4]);
            let c = t.concat(&[r, r], 0);
            t.square(c)
        });
        fd_check(&x, |t, v| {
            let sm = t.softmax_rows(v);
            let k = t.constant(w.clone().reversed_axes().as_standard_layout().into_owned());
            t.mul(sm, k)
        });
        fd_check(&x, |t, v| {
            let g = t.constant(arr1(&[1.5, -0.5, 2.0]).into_dyn());
            let b = t.constant(arr1(&[0.1, 0.2, 0.3]).into_dyn());
            let ln = t.layer_norm(v, g, b, 1e-5);
            t.square(ln)
        });
    }

    #[test]
    fn im2col_gradient_and_values() {
        let x = Array3::from_shape_fn((2, 5, 4), |(c, i, j)| {
            ((c * 31 + i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4
        })
        .into_dyn();
        let geom = PatchGeometry {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let cols = im2col(&x, geom);
        assert_eq!(cols.shape(), &[18, 3 * 2]);
        // centre tap of the first output position is the top-left input pixel
        assert_eq!(cols[[4, 0]], x[[0, 0, 0]]);
        // padded corner tap is zero
        assert_eq!(cols[[0, 0]], 0.0);
        fd_check(&x, |t, v| {
            let c = t.im2col(v, geom);
            t.square(c)
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let a = arr1(&[1.0, 2.0]).into_dyn();
        let b = arr1(&[3.0, 4.0]).into_dyn();
        let mut tape = Tape::new();
        let va = tape.param("a", &a, true);
        let vb = tape.param("b", &b, false);
        let p = tape.mul(va, vb);
        let y = tape.sum(p);
        let g = tape.backward(y);
        assert_eq!(g.get(va).unwrap().as_slice().unwrap(), &[3.0, 4.0]);
        assert!(g.get(vb).is_none());
        // re-registering a name returns the same leaf
        assert_eq!(tape.param("a", &a, true), va);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!(normal_cdf(-40.0) > 0.0 || normal_cdf(-40.0) == 0.0);
        assert!((normal_cdf(3.0) + normal_cdf(-3.0) - 1.0).abs() < 1e-15);
    }
}
