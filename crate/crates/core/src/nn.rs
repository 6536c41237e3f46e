//! Parameter storage, layers and the optimizer.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Replaces the tensor behind `name`, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<(), String> {
        let i = *self.index.get(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                self.tensors[i].shape(),
                t.shape()
            ));
        }
        self.tensors[i] = t;
        Ok(())
    }
}

/// Creates named, randomly initialized parameters in `f64`.
pub struct ParamBuilder {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Runs `f` with `name` pushed onto the naming scope.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Glorot-uniform weights.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..limit)).collect();
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::full(shape, v))
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Self {
        pb.scope(name, |pb| Self {
            w: pb.glorot("w", &[input, output], input, output),
            b: pb.constant("b", &[output], 0.0),
            input,
            output,
        })
    }

    /// `[n,input] -> [n,output]`.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(g.param(s, self.w)).add_row(g.param(s, self.b))
    }
}

/// Fully connected stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists the widths including input and output.
    pub fn new(pb: &mut ParamBuilder, name: &str, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2);
        pb.scope(name, |pb| Self {
            layers: sizes
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(pb, &i.to_string(), w[0], w[1]))
                .collect(),
        })
    }

    /// Widths for `layers` linear layers of width `hidden`.
    pub fn sizes(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<usize> {
        let mut v = vec![input];
        v.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
        v.push(output);
        v
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, s, h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }

    pub fn output(&self) -> usize {
        self.layers.last().unwrap().output
    }
}

/// Standard LSTM cell; gates ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize, forget_bias: f64) -> Self {
        pb.scope(name, |pb| {
            let wx = pb.glorot("wx", &[input, 4 * hidden], input, 4 * hidden);
            let wh = pb.glorot("wh", &[hidden, 4 * hidden], hidden, 4 * hidden);
            let mut bias = vec![0.0; 4 * hidden];
            bias[hidden..2 * hidden].fill(forget_bias);
            let name = pb.full_name("b");
            let b = pb.store.insert(&name, Tensor::from_vec(&[4 * hidden], bias));
            Self { wx, wh, b, hidden }
        })
    }

    /// One step on row-batched `[n,input]` inputs; returns `(h, c)`.
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        x: Var<'g, T>,
        h: Var<'g, T>,
        c: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let pre = (x.matmul(g.param(s, self.wx)) + h.matmul(g.param(s, self.wh))).add_row(g.param(s, self.b));
        gates(pre, c, 1, self.hidden)
    }
}

/// Applies LSTM gate nonlinearities to pre-activations split along `axis`.
fn gates<'g, T: Scalar>(pre: Var<'g, T>, c: Var<'g, T>, axis: usize, hidden: usize) -> (Var<'g, T>, Var<'g, T>) {
    let i = pre.narrow(axis, 0, hidden).sigmoid();
    let f = pre.narrow(axis, hidden, hidden).sigmoid();
    let cand = pre.narrow(axis, 2 * hidden, hidden).tanh();
    let o = pre.narrow(axis, 3 * hidden, hidden).sigmoid();
    let c_next = f * c + i * cand;
    let h_next = o * c_next.tanh();
    (h_next, c_next)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        pb.scope(name, |pb| Self {
            w: pb.glorot(
                "w",
                &[output, input, kernel, kernel],
                input * kernel * kernel,
                output * kernel * kernel,
            ),
            b: pb.constant("b", &[output], 0.0),
            stride,
            pad,
            out_channels: output,
        })
    }

    /// Same-size convolution with an odd kernel.
    pub fn same(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, kernel: usize) -> Self {
        Self::new(pb, name, input, output, kernel, 1, kernel / 2)
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(g.param(s, self.w), self.stride, self.pad)
            .add_channel(g.param(s, self.b))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        pb.scope(name, |pb| Self {
            w: pb.glorot(
                "w",
                &[input, output, kernel, kernel],
                input * kernel * kernel,
                output * kernel * kernel,
            ),
            b: pb.constant("b", &[output], 0.0),
            stride,
            pad,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(g.param(s, self.w), self.stride, self.pad, 0)
            .add_channel(g.param(s, self.b))
    }
}

/// LSTM cell whose affine maps are same-size convolutions over `[c,h,w]` maps.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub conv: Conv2d,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize, kernel: usize) -> Self {
        let conv = Conv2d::same(pb, name, input + hidden, 4 * hidden, kernel);
        set_forget_bias(pb, &conv, hidden);
        Self { conv, hidden }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        x: Var<'g, T>,
        h: Var<'g, T>,
        c: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let pre = self.conv.forward(g, s, g.concat(&[x, h], 0));
        gates(pre, c, 0, self.hidden)
    }
}

fn set_forget_bias(pb: &mut ParamBuilder, conv: &Conv2d, hidden: usize) {
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    pb.store.tensors[conv.b.0] = Tensor::from_vec(&[4 * hidden], bias);
}

/// ConvLSTM whose input splits into channels that change on every call and
/// channels that stay fixed across a run of calls. The convolution of the
/// fixed part is computed once with [`SplitConvLstmCell::fixed_part`].
#[derive(Clone, Debug)]
pub struct SplitConvLstmCell {
    pub dynamic: Conv2d,
    pub fixed_w: Option<ParamId>,
    pub hidden: usize,
    pub kernel: usize,
}

impl SplitConvLstmCell {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dynamic_in: usize,
        fixed_in: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        let dynamic = Conv2d::same(pb, name, dynamic_in + hidden, 4 * hidden, kernel);
        set_forget_bias(pb, &dynamic, hidden);
        let fixed_w = (fixed_in > 0).then(|| {
            pb.scope(name, |pb| {
                pb.glorot(
                    "fixed_w",
                    &[4 * hidden, fixed_in, kernel, kernel],
                    (fixed_in + dynamic_in + hidden) * kernel * kernel,
                    4 * hidden * kernel * kernel,
                )
            })
        });
        Self {
            dynamic,
            fixed_w,
            hidden,
            kernel,
        }
    }

    /// Gate pre-activations contributed by the fixed inputs.
    pub fn fixed_part<'g, T: Scalar>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = self.fixed_w.expect("cell was built without fixed inputs");
        x.conv2d(g.param(s, w), 1, self.kernel / 2)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        s: &ParamStore<T>,
        x: Option<Var<'g, T>>,
        fixed: Option<Var<'g, T>>,
        h: Var<'g, T>,
        c: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let input = match x {
            Some(x) => g.concat(&[x, h], 0),
            None => h,
        };
        let mut pre = self.dynamic.forward(g, s, input);
        if let Some(f) = fixed {
            pre = pre + f;
        }
        gates(pre, c, 0, self.hidden)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Gradient-descent step on `store` (the caller passes gradients of the loss).
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let lr_t = T::lit(self.lr * bc2.sqrt() / bc1);
        let eps = T::lit(self.eps * bc2.sqrt());
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps);
            }
        }
    }
}
