//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! [`Var`] is created and the tape is walked backwards by
//! [`Graph::backward`]. A graph is single-threaded; data-parallel training
//! builds one graph per episode and reduces the resulting [`Gradients`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    AddRow(usize, usize),
    AddChannel(usize, usize),
    BroadcastRows(usize),
    BroadcastSpatial(usize),
    Sum(usize),
    SumRows(usize),
    MatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom, out_channels: usize },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeom, in_channels: usize },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<usize, usize>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.add_assign(s),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            let ng = |i: &usize| nodes[*i].needs_grad;
            match &op {
                Op::Leaf { param } => param.is_some(),
                Op::Unary(_, a)
                | Op::AddScalar(a)
                | Op::MulScalar(a, _)
                | Op::BroadcastRows(a)
                | Op::BroadcastSpatial(a)
                | Op::Sum(a)
                | Op::SumRows(a)
                | Op::Reshape(a)
                | Op::Narrow { input: a, .. } => ng(a),
                Op::Binary(_, a, b) | Op::AddRow(a, b) | Op::AddChannel(a, b) | Op::MatMul(a, b) => {
                    ng(a) || ng(b)
                }
                Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => ng(x) || ng(w),
                Op::Concat { inputs, .. } => inputs.iter().any(ng),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn scalar(&self, v: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(v)))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(Tensor::zeros(shape))
    }

    /// The leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id.0) {
            return Var { g: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf { param: Some(id.0) });
        self.param_nodes.borrow_mut().insert(id.0, v.id);
        v
    }

    pub fn concat(&self, vars: &[Var<'_, T>], axis: usize) -> Var<'_, T> {
        assert!(!vars.is_empty(), "concat of nothing");
        if vars.len() == 1 {
            return Var {
                g: self,
                id: vars[0].id,
            };
        }
        let vals: Vec<_> = vars.iter().map(|v| self.val(v.id)).collect();
        let mut shape = vals[0].shape().to_vec();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            assert_eq!(s.len(), shape.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", s, shape);
            }
            total += s[axis];
        }
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>, n_params: usize) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        let mut out = Gradients::empty(n_params);

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) {
            if !nodes[id].needs_grad {
                return;
            }
            match grads[id].as_mut() {
                Some(existing) => existing.add_assign(&g),
                None => grads[id] = Some(g),
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        out.grads[*p] = Some(gy);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[*a].value;
                    let gx = match kind {
                        Unary::Neg => gy.map(|g| -g),
                        Unary::Exp => gy.zip_map(y, |g, y| g * y),
                        Unary::Log => gy.zip_map(x, |g, x| g / x),
                        Unary::Sigmoid => gy.zip_map(y, |g, y| g * y * (T::one() - y)),
                        Unary::Tanh => gy.zip_map(y, |g, y| g * (T::one() - y * y)),
                        Unary::Relu => gy.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }),
                        Unary::Softplus => gy.zip_map(x, |g, x| g * sigmoid(x)),
                        Unary::Square => gy.zip_map(x, |g, x| g * (x + x)),
                        Unary::Sqrt => gy.zip_map(y, |g, y| g * T::lit(0.5) / y),
                    };
                    acc(&mut grads, &nodes, *a, gx);
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    match kind {
                        Binary::Add => {
                            acc(&mut grads, &nodes, *b, gy.clone());
                            acc(&mut grads, &nodes, *a, gy);
                        }
                        Binary::Sub => {
                            acc(&mut grads, &nodes, *b, gy.map(|g| -g));
                            acc(&mut grads, &nodes, *a, gy);
                        }
                        Binary::Mul => {
                            if nodes[*a].needs_grad {
                                acc(&mut grads, &nodes, *a, gy.zip_map(bv, |g, b| g * b));
                            }
                            if nodes[*b].needs_grad {
                                acc(&mut grads, &nodes, *b, gy.zip_map(av, |g, a| g * a));
                            }
                        }
                        Binary::Div => {
                            if nodes[*a].needs_grad {
                                acc(&mut grads, &nodes, *a, gy.zip_map(bv, |g, b| g / b));
                            }
                            if nodes[*b].needs_grad {
                                // d(a/b)/db = -y/b
                                let t = gy.zip_map(y, |g, y| -g * y);
                                acc(&mut grads, &nodes, *b, t.zip_map(bv, |t, b| t / b));
                            }
                        }
                    }
                }
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, gy),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    acc(&mut grads, &nodes, *a, gy.map(|g| g * c))
                }
                Op::AddRow(a, b) => {
                    if nodes[*b].needs_grad {
                        let d = nodes[*b].value.len();
                        let mut gb = vec![T::zero(); d];
                        for row in gy.data().chunks(d) {
                            for (s, &g) in gb.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                        acc(&mut grads, &nodes, *b, Tensor::from_vec(nodes[*b].value.shape(), gb));
                    }
                    acc(&mut grads, &nodes, *a, gy);
                }
                Op::AddChannel(a, b) => {
                    if nodes[*b].needs_grad {
                        let c = nodes[*b].value.len();
                        let plane = gy.len() / c;
                        let gb = gy.data().chunks(plane).map(|p| p.iter().copied().sum()).collect();
                        acc(&mut grads, &nodes, *b, Tensor::from_vec(nodes[*b].value.shape(), gb));
                    }
                    acc(&mut grads, &nodes, *a, gy);
                }
                Op::BroadcastRows(a) => {
                    let d = nodes[*a].value.len();
                    let mut ga = vec![T::zero(); d];
                    for row in gy.data().chunks(d) {
                        for (s, &g) in ga.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(nodes[*a].value.shape(), ga));
                }
                Op::BroadcastSpatial(a) => {
                    let c = nodes[*a].value.len();
                    let plane = gy.len() / c;
                    let ga = gy.data().chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(nodes[*a].value.shape(), ga));
                }
                Op::Sum(a) => {
                    let g = gy.data()[0];
                    acc(&mut grads, &nodes, *a, Tensor::full(nodes[*a].value.shape(), g));
                }
                Op::SumRows(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let d = gy.len();
                    let mut data = Vec::with_capacity(shape[0] * d);
                    for _ in 0..shape[0] {
                        data.extend_from_slice(gy.data());
                    }
                    acc(&mut grads, &nodes, *a, Tensor::from_vec(&shape, data));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                    if nodes[*a].needs_grad {
                        let ga = tensor::matmul_nt(gy.data(), bv.data(), n, m, k);
                        acc(&mut grads, &nodes, *a, Tensor::from_vec(&[n, k], ga));
                    }
                    if nodes[*b].needs_grad {
                        let gb = tensor::matmul_tn(av.data(), gy.data(), n, k, m);
                        acc(&mut grads, &nodes, *b, Tensor::from_vec(&[k, m], gb));
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = split_axis(gy.shape(), *axis);
                    let mut offset = 0;
                    for &inp in inputs {
                        let shape = nodes[inp].value.shape();
                        let width = shape[*axis] * inner;
                        if nodes[inp].needs_grad {
                            let total = gy.shape()[*axis] * inner;
                            let mut data = Vec::with_capacity(outer * width);
                            for o in 0..outer {
                                let base = o * total + offset;
                                data.extend_from_slice(&gy.data()[base..base + width]);
                            }
                            acc(&mut grads, &nodes, inp, Tensor::from_vec(shape, data));
                        }
                        offset += width;
                    }
                }
                Op::Narrow { input, axis, start } => {
                    let shape = nodes[*input].value.shape();
                    let (outer, full, inner) = split_axis(shape, *axis);
                    let len = gy.shape()[*axis];
                    let mut data = vec![T::zero(); outer * full * inner];
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        let src = o * len * inner;
                        data[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                    }
                    acc(&mut grads, &nodes, *input, Tensor::from_vec(shape, data));
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(&mut grads, &nodes, *a, gy.reshaped(&shape));
                }
                Op::Conv2d {
                    x,
                    w,
                    geom,
                    out_channels,
                } => {
                    let (oh, ow) = geom.out_hw();
                    let p = oh * ow;
                    let ck = geom.col_rows();
                    let xv = &nodes[*x].value;
                    if nodes[*w].needs_grad {
                        let cols = tensor::im2col(xv.data(), geom);
                        let gw = tensor::matmul_nt(gy.data(), &cols, *out_channels, p, ck);
                        acc(&mut grads, &nodes, *w, Tensor::from_vec(nodes[*w].value.shape(), gw));
                    }
                    if nodes[*x].needs_grad {
                        let wv = &nodes[*w].value;
                        let gcols = tensor::matmul_tn(wv.data(), gy.data(), *out_channels, ck, p);
                        let gx = tensor::col2im(&gcols, geom);
                        acc(&mut grads, &nodes, *x, Tensor::from_vec(xv.shape(), gx));
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    geom,
                    in_channels,
                } => {
                    // geom describes the equivalent forward conv over the output image.
                    let (h, wd) = geom.out_hw();
                    let hw = h * wd;
                    let ck = geom.col_rows();
                    let gcols = tensor::im2col(gy.data(), geom);
                    if nodes[*x].needs_grad {
                        let wv = &nodes[*w].value;
                        let gx = tensor::matmul(wv.data(), &gcols, *in_channels, ck, hw);
                        acc(&mut grads, &nodes, *x, Tensor::from_vec(nodes[*x].value.shape(), gx));
                    }
                    if nodes[*w].needs_grad {
                        let xv = &nodes[*x].value;
                        let gw = tensor::matmul_nt(xv.data(), &gcols, *in_channels, hw, ck);
                        acc(&mut grads, &nodes, *w, Tensor::from_vec(nodes[*w].value.shape(), gw));
                    }
                }
            }
        }
        out
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single element of a one-element tensor, widened to `f64`.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor of {} elements", v.len());
        v.data()[0].as_f64()
    }

    fn unary(self, kind: Unary, f: impl Fn(T) -> T) -> Self {
        let v = self.value().map(f);
        self.g.push(v, Op::Unary(kind, self.id))
    }

    pub fn exp(self) -> Self {
        self.unary(Unary::Exp, |x| x.exp())
    }
    pub fn ln(self) -> Self {
        self.unary(Unary::Log, |x| x.ln())
    }
    pub fn sigmoid(self) -> Self {
        self.unary(Unary::Sigmoid, sigmoid)
    }
    pub fn tanh(self) -> Self {
        self.unary(Unary::Tanh, |x| x.tanh())
    }
    pub fn relu(self) -> Self {
        self.unary(Unary::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }
    pub fn softplus(self) -> Self {
        self.unary(Unary::Softplus, softplus)
    }
    pub fn square(self) -> Self {
        self.unary(Unary::Square, |x| x * x)
    }
    pub fn sqrt(self) -> Self {
        self.unary(Unary::Sqrt, |x| x.sqrt())
    }

    fn binary(self, kind: Binary, other: Self, f: impl Fn(T, T) -> T) -> Self {
        let v = self.value().zip_map(&other.value(), f);
        self.g.push(v, Op::Binary(kind, self.id, other.id))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::lit(c);
        let v = self.value().map(|x| x + c);
        self.g.push(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, c: f64) -> Self {
        let c = T::lit(c);
        let v = self.value().map(|x| x * c);
        self.g.push(v, Op::MulScalar(self.id, c))
    }

    /// `[n,d] + [d]` broadcast over rows.
    pub fn add_row(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        let d = b.len();
        assert_eq!(*x.shape().last().unwrap(), d, "add_row width mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.g.push(out, Op::AddRow(self.id, bias.id))
    }

    /// `[c,h,w] + [c]` broadcast over the spatial plane.
    pub fn add_channel(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.dim(0), b.len(), "add_channel depth mismatch");
        let plane = x.len() / b.len();
        let mut out = (*x).clone();
        for (p, &bv) in out.data_mut().chunks_mut(plane).zip(b.data()) {
            for o in p {
                *o += bv;
            }
        }
        self.g.push(out, Op::AddChannel(self.id, bias.id))
    }

    /// `[d] -> [n,d]`.
    pub fn broadcast_rows(self, n: usize) -> Self {
        let v = self.value();
        let d = v.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        self.g.push(Tensor::from_vec(&[n, d], data), Op::BroadcastRows(self.id))
    }

    /// `[c] -> [c,h,w]`.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Self {
        let v = self.value();
        let c = v.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        self.g.push(Tensor::from_vec(&[c, h, w], data), Op::BroadcastSpatial(self.id))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.g.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// `[n,d] -> [d]`.
    pub fn sum_rows(self) -> Self {
        let v = self.value();
        let d = v.dim(1);
        let mut out = vec![T::zero(); d];
        for row in v.data().chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.g.push(Tensor::from_vec(&[d], out), Op::SumRows(self.id))
    }

    /// `[n,d] -> [d]`; `n` must be positive.
    pub fn mean_rows(self) -> Self {
        let n = self.shape()[0];
        assert!(n > 0, "mean over an empty set");
        self.sum_rows().mul_scalar(1.0 / n as f64)
    }

    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2);
        assert_eq!(b.shape().len(), 2);
        let (n, k, m) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(k, b.dim(0), "matmul inner dim mismatch {:?} x {:?}", a.shape(), b.shape());
        let out = tensor::matmul(a.data(), b.data(), n, k, m);
        self.g.push(Tensor::from_vec(&[n, m], out), Op::MatMul(self.id, other.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let v = self.value();
        let (outer, full, inner) = split_axis(v.shape(), axis);
        assert!(start + len <= full, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.g.push(
            Tensor::from_vec(&shape, data),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = (*self.value()).clone().reshaped(shape);
        self.g.push(v, Op::Reshape(self.id))
    }

    /// 2D convolution of a `[c,h,w]` image with a `[o,c,k,k]` kernel.
    pub fn conv2d(self, weight: Self, stride: usize, pad: usize) -> Self {
        let (x, w) = (self.value(), weight.value());
        let ws = w.shape();
        assert_eq!(x.shape().len(), 3, "conv2d expects [c,h,w]");
        assert_eq!(ws[1], x.dim(0), "conv2d channel mismatch: kernel {:?} input {:?}", ws, x.shape());
        let geom = ConvGeom {
            channels: x.dim(0),
            height: x.dim(1),
            width: x.dim(2),
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let cols = tensor::im2col(x.data(), &geom);
        let out = tensor::matmul(w.data(), &cols, ws[0], geom.col_rows(), oh * ow);
        self.g.push(
            Tensor::from_vec(&[ws[0], oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                out_channels: ws[0],
            },
        )
    }

    /// Transposed convolution of a `[c,h,w]` image with a `[c,o,k,k]` kernel.
    pub fn conv_transpose2d(self, weight: Self, stride: usize, pad: usize, out_pad: usize) -> Self {
        let (x, w) = (self.value(), weight.value());
        let ws = w.shape();
        assert_eq!(ws[0], x.dim(0), "conv_transpose2d channel mismatch");
        let (h, wd, k) = (x.dim(1), x.dim(2), ws[2]);
        let geom = ConvGeom {
            channels: ws[1],
            height: (h - 1) * stride + k + out_pad - 2 * pad,
            width: (wd - 1) * stride + k + out_pad - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let cols = tensor::matmul_tn(w.data(), x.data(), ws[0], geom.col_rows(), h * wd);
        let out = tensor::col2im(&cols, &geom);
        self.g.push(
            Tensor::from_vec(&[ws[1], geom.height, geom.width], out),
            Op::ConvTranspose2d {
                x: self.id,
                w: weight.id,
                geom,
                in_channels: ws[0],
            },
        )
    }
}

impl<'g, T: Scalar> ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self {
        self.binary(Binary::Add, rhs, |a, b| a + b)
    }
}

impl<'g, T: Scalar> ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(Binary::Sub, rhs, |a, b| a - b)
    }
}

impl<'g, T: Scalar> ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(Binary::Mul, rhs, |a, b| a * b)
    }
}

impl<'g, T: Scalar> ops::Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self {
        self.binary(Binary::Div, rhs, |a, b| a / b)
    }
}

impl<'g, T: Scalar> ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self {
        self.unary(Unary::Neg, |x| -x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    /// Central-difference check of d(loss)/d(param) for a closure building the loss.
    fn check<F>(store: &ParamStore<f64>, build: F)
    where
        F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Var<'g, f64>,
    {
        let g = Graph::new();
        let loss = build(&g, store);
        let grads = g.backward(loss, store.len());
        let eps = 1e-6;
        for id in store.ids() {
            let n = store.get(id).len();
            for i in 0..n {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= eps;
                let gp = Graph::new();
                let lp = build(&gp, &plus).item();
                let gm = Graph::new();
                let lm = build(&gm, &minus).item();
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {} [{}]: fd {} vs analytic {}",
                    store.name(id),
                    i,
                    fd,
                    an
                );
            }
        }
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * scale).sin()).collect())
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.insert("a", seq(&[2, 3], 0.7));
        let b = store.insert("b", seq(&[2, 3], 1.3).map(|v| v.abs() + 0.5));
        check(&store, |g, s| {
            let (a, b) = (g.param(s, a), g.param(s, b));
            let t = (a * b).exp() + (a / b).tanh() - b.ln() + a.sigmoid().square() + a.softplus();
            let u = (b.sqrt() + a.relu()).mul_scalar(0.3).add_scalar(1.0);
            (t * u - (-a)).sum()
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.insert("a", seq(&[3, 4], 0.3));
        let w = store.insert("w", seq(&[4, 2], 0.9));
        let bias = store.insert("bias", seq(&[2], 0.4));
        let v = store.insert("v", seq(&[4], 0.2));
        check(&store, |g, s| {
            let a = g.param(s, a);
            let h = a.matmul(g.param(s, w)).add_row(g.param(s, bias)).tanh();
            let vb = g.param(s, v).broadcast_rows(3);
            let cat = g.concat(&[h, vb, a], 1);
            let part = cat.narrow(1, 1, 5).reshape(&[5, 3]);
            let pooled = part.mean_rows();
            (pooled.square().sum() + cat.sum_rows().sum()).mul_scalar(0.5)
        });
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.insert("x", seq(&[2, 5, 5], 0.37));
        let w = store.insert("w", seq(&[3, 2, 3, 3], 0.21));
        let b = store.insert("b", seq(&[3], 0.5));
        let wt = store.insert("wt", seq(&[3, 2, 4, 4], 0.13));
        let v = store.insert("v", seq(&[2], 0.8));
        check(&store, |g, s| {
            let x = g.param(s, x);
            let y = x.conv2d(g.param(s, w), 2, 1).add_channel(g.param(s, b)).tanh();
            let up = y.conv_transpose2d(g.param(s, wt), 2, 1, 0);
            let vs = g.param(s, v).broadcast_spatial(6, 6);
            let cat = g.concat(&[up, vs], 0);
            cat.square().sum()
        });
    }

    #[test]
    fn conv_transpose_output_shape() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 16, 16]));
        let w = g.constant(Tensor::zeros(&[4, 3, 4, 4]));
        assert_eq!(x.conv_transpose2d(w, 2, 1, 0).shape(), vec![3, 32, 32]);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::from_vec(&[1], vec![3.0]));
        let g = Graph::new();
        let x = g.param(&store, a);
        let y = g.param(&store, a);
        let loss = (x * y).sum();
        let grads = g.backward(loss, store.len());
        assert_eq!(grads.get(a).unwrap().data()[0], 6.0);
    }
}
