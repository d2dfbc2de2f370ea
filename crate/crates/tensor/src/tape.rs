//! The computation record. Every operation appends a node holding its value
//! and the inputs needed to differentiate it; nodes are therefore already in
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::activation as act;
use crate::ops::conv::{self, ConvDims, ConvSpec, UpConvDims};
use crate::ops::layout::{self, PadDims};
use crate::ops::pool::{self, PoolDims};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    AddScalar(Var),
    MulScalar(Var, f64),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Var, Var),
    Pad(Var, PadDims),
    LeakyRelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: UpConvDims,
    },
    AvgPool(Var, PoolDims),
    Upsample(Var, PoolDims),
    Sparse {
        x: Var,
        matrix: Arc<CsrMatrix>,
        transposed: bool,
        outer: usize,
        inner: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of operations with their forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into the accumulator of `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.into_data(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`: gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bn = self.value(b).len();
        if sa != sb && bn != 1 {
            return Err(TensorError::shape(name, sa, sb));
        }
        let shape = sa.to_vec();
        let av = self.value(a);
        let bv = self.value(b);
        let value = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let y = bv[0];
            av.iter().map(|&x| f(x, y)).collect()
        };
        Ok(self.push(shape, value, op, &[a, b]))
    }

    /// `a + b`; `b` may be a one-element variable broadcast over `a`.
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

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(shape, value, op, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Sums `[B, C, rest...]` over every axis after the channel axis.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("sum_spatial", &shape, "expected rank >= 2"));
        }
        let rest: usize = shape[2..].iter().product();
        let value = self.value(x).chunks(rest).map(|c| c.iter().sum()).collect();
        Ok(self.push(vec![shape[0], shape[1]], value, Op::SumSpatial(x), &[x]))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out_shape = layout::check_perm(&shape, perm)?;
        let value = layout::permute(self.value(x), &shape, perm);
        Ok(self.push(out_shape, value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(TensorError::shape("concat_channels", &sa, &sb));
        }
        let rest: usize = sa[2..].iter().product();
        let value = layout::concat_channels(self.value(a), self.value(b), sa[0], sa[1], sb[1], rest);
        let mut shape = sa.clone();
        shape[1] += sb[1];
        Ok(self.push(shape, value, Op::Concat(a, b), &[a, b]))
    }

    /// Zero-pads `axis` with `before` and `after` elements.
    pub fn pad_axis(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let dims = PadDims::new(&shape, axis, before, after)?;
        let value = layout::pad(&dims, self.value(x));
        shape[axis] += before + after;
        Ok(self.push(shape, value, Op::Pad(x, dims), &[x]))
    }

    // ---- activations -------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = act::leaky_relu(self.value(x));
        self.push(shape, value, Op::LeakyRelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = act::sigmoid(self.value(x));
        self.push(shape, value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the channel axis of `[B, C, rest...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("softmax", &shape, "channel axis required"));
        }
        let rest = shape[2..].iter().product();
        let value = act::softmax_channels(self.value(x), shape[0], shape[1], rest);
        Ok(self.push(shape, value, Op::Softmax(x), &[x]))
    }

    // ---- convolution, pooling ----------------------------------------

    /// Convolution of `[B, Ci, spatial...]` with `[Co, Ci, kernel...]` (2 or
    /// 3 spatial axes) and an optional `[Co]` bias.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let dims = ConvDims::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.co] {
                return Err(TensorError::shape("conv bias", self.shape(b), &[dims.co]));
            }
        }
        let value = conv::conv_forward(&dims, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = dims.out_shape();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, value, Op::Conv { x, w, b, dims }, &inputs))
    }

    /// Transposed convolution, kernel 2 / stride 2; weight `[Ci, Co, 2, ...]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let dims = UpConvDims::new(self.shape(x), self.shape(w))?;
        if let Some(b) = b {
            if self.shape(b) != [dims.co] {
                return Err(TensorError::shape("conv_transpose2 bias", self.shape(b), &[dims.co]));
            }
        }
        let value = conv::conv_transpose_forward(&dims, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = dims.out_shape();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, value, Op::ConvTranspose { x, w, b, dims }, &inputs))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let dims = PoolDims::for_pool(self.shape(x))?;
        let value = pool::avg_pool(&dims, self.value(x));
        let shape = dims.coarse_shape(self.shape(x));
        Ok(self.push(shape, value, Op::AvgPool(x, dims), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let dims = PoolDims::for_upsample(self.shape(x))?;
        let value = pool::upsample(&dims, self.value(x));
        let shape = dims.fine_shape(self.shape(x));
        Ok(self.push(shape, value, Op::Upsample(x, dims), &[x]))
    }

    // ---- sparse ------------------------------------------------------

    /// Applies `matrix` (or its transpose) along axis `axis` of `x`.
    pub fn sparse_along(&mut self, matrix: &Arc<CsrMatrix>, x: Var, axis: usize, transposed: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sparse_apply", &shape, format!("axis {axis} out of range")));
        }
        let (n_in, n_out) = matrix.io_dims(transposed);
        if shape[axis] != n_in {
            return Err(TensorError::DimensionMismatch {
                expected: n_in,
                got: shape[axis],
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let mut value = vec![0.0; outer * n_out * inner];
        matrix.apply_lines(self.value(x), &mut value, outer, inner, transposed);
        let mut out_shape = shape;
        out_shape[axis] = n_out;
        let op = Op::Sparse {
            x,
            matrix: Arc::clone(matrix),
            transposed,
            outer,
            inner,
        };
        Ok(self.push(out_shape, value, op, &[x]))
    }

    /// Sparse mat-vec on a flat vector.
    pub fn sparse_apply(&mut self, matrix: &Arc<CsrMatrix>, x: Var, transposed: bool) -> Result<Var> {
        let n = self.value(x).len();
        let flat = if self.shape(x).len() == 1 { x } else { self.reshape(x, &[n])? };
        self.sparse_along(matrix, flat, 0, transposed)
    }

    // ---- reverse sweep -----------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Intermediate gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.sweep(loss, true)
    }

    /// Like [`Tape::backward`], but frees intermediate gradients as soon as
    /// they have been propagated; only leaf gradients remain.
    pub fn backward_leaves(&self, loss: Var) -> Result<Gradients> {
        self.sweep(loss, false)
    }

    fn sweep(&self, loss: Var, retain: bool) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if retain {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if self.rg(*b) {
                    let nb = self.len_of(*b);
                    add_into(&mut grads[b.0], nb, |d| {
                        if nb == g.len() {
                            d.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                        } else {
                            d[0] += sign * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let av = self.value(*a);
                let bv = self.value(*b);
                let bcast = bv.len() != av.len();
                let bat = |i: usize| if bcast { bv[0] } else { bv[i] };
                if self.rg(*a) {
                    add_into(&mut grads[a.0], av.len(), |d| {
                        for (i, x) in d.iter_mut().enumerate() {
                            *x += if div { g[i] / bat(i) } else { g[i] * bat(i) };
                        }
                    });
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], bv.len(), |d| {
                        for i in 0..g.len() {
                            let gi = if div {
                                -g[i] * av[i] / (bat(i) * bat(i))
                            } else {
                                g[i] * av[i]
                            };
                            if bcast {
                                d[0] += gi;
                            } else {
                                d[i] += gi;
                            }
                        }
                    });
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
            }
            Op::MulScalar(x, s) => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
                }
            }
            Op::Square(x) | Op::Abs(x) | Op::Clamp(x, ..) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let deriv = |v: f64| match node.op {
                        Op::Square(_) => 2.0 * v,
                        Op::Abs(_) => {
                            if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Clamp(_, lo, hi) => {
                            if v > lo && v < hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    add_into(&mut grads[x.0], xv.len(), |d| {
                        for ((o, &v), &gv) in d.iter_mut().zip(xv).zip(g) {
                            *o += gv * deriv(v);
                        }
                    });
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    let s = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    add_into(&mut grads[x.0], n, |d| d.iter_mut().for_each(|v| *v += s));
                }
            }
            Op::SumSpatial(x) => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    let rest = n / g.len();
                    add_into(&mut grads[x.0], n, |d| {
                        for (chunk, &gv) in d.chunks_mut(rest).zip(g) {
                            chunk.iter_mut().for_each(|v| *v += gv);
                        }
                    });
                }
            }
            Op::Permute(x, perm) => {
                if self.rg(*x) {
                    let inv = layout::inverse_perm(perm);
                    let back = layout::permute(g, &node.shape, &inv);
                    add_into(&mut grads[x.0], back.len(), |d| d.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
                }
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let rest: usize = sa[2..].iter().product();
                let (batch, ca, cb) = (sa[0], sa[1], self.shape(*b)[1]);
                let (na, nb) = (self.len_of(*a), self.len_of(*b));
                let (ra, rb) = (self.rg(*a), self.rg(*b));
                let mut ga = ra.then(|| vec![0.0; na]);
                let mut gb = rb.then(|| vec![0.0; nb]);
                layout::split_channels_grad(g, ga.as_deref_mut(), gb.as_deref_mut(), batch, ca, cb, rest);
                self.merge(grads, *a, ga);
                self.merge(grads, *b, gb);
            }
            Op::Pad(x, dims) => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    add_into(&mut grads[x.0], n, |d| layout::pad_backward(dims, g, d));
                }
            }
            Op::LeakyRelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    add_into(&mut grads[x.0], xv.len(), |d| act::leaky_relu_backward(xv, g, d));
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| act::sigmoid_backward(&node.value, g, d));
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let s = &node.shape;
                    let rest = s[2..].iter().product();
                    add_into(&mut grads[x.0], g.len(), |d| {
                        act::softmax_channels_backward(&node.value, g, d, s[0], s[1], rest)
                    });
                }
            }
            Op::Conv { x, w, b, dims } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv::conv_backward(dims, self.value(*x), self.value(*w), g, need);
                self.merge(grads, *x, cg.x);
                self.merge(grads, *w, cg.w);
                if let Some(b) = b {
                    self.merge(grads, *b, cg.b);
                }
            }
            Op::ConvTranspose { x, w, b, dims } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = conv::conv_transpose_backward(dims, self.value(*x), self.value(*w), g, need);
                self.merge(grads, *x, cg.x);
                self.merge(grads, *w, cg.w);
                if let Some(b) = b {
                    self.merge(grads, *b, cg.b);
                }
            }
            Op::AvgPool(x, dims) => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    add_into(&mut grads[x.0], n, |d| pool::avg_pool_backward(dims, g, d));
                }
            }
            Op::Upsample(x, dims) => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    add_into(&mut grads[x.0], n, |d| pool::upsample_backward(dims, g, d));
                }
            }
            Op::Sparse {
                x,
                matrix,
                transposed,
                outer,
                inner,
            } => {
                if self.rg(*x) {
                    let n = self.len_of(*x);
                    add_into(&mut grads[x.0], n, |d| matrix.apply_lines(g, d, *outer, *inner, !*transposed));
                }
            }
        }
    }

    fn merge(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
        if let Some(g) = g {
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => grads[v.0] = Some(g),
            }
        }
    }
}
