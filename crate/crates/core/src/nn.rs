//! A small CPU convolutional-network engine with reverse-mode gradients.
//!
//! Feature maps are single-sample `H × W × C` tensors (channels fastest).
//! Batches are handled one sample at a time by the callers, which keeps
//! every kernel simple and makes per-sample parallelism trivial.
//!
//! Gradients are accumulated into a *mirror* of the network: a clone with
//! the same layer structure whose parameters hold partial derivatives. The
//! optimizer then walks both trees in the same canonical parameter order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Spatial shape of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample's feature map in `H × W × C` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(shape.len(), data.len(), "tensor data does not match shape");
        Self { shape, data }
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output size `ceil(in / stride)`, zero padding split evenly with the
    /// extra pixel at the end.
    Same,
    /// No padding; the window must fit.
    Valid,
}

impl Padding {
    /// Output length and leading pad for one axis.
    fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

/// Logistic function, stable for large `|x|`.
pub fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * logistic(x),
            Activation::Sigmoid => logistic(x),
        }
    }

    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = logistic(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = logistic(x);
                s * (T::one() - s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
    /// `[out_c][kh][kw][in_c / groups]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-channel `x * scale + shift`; a batch-norm folded for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub size: usize,
    pub stride: usize,
    pub padding: Padding,
}

/// `post(shortcut(x) + scale · body(x))`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T> {
    pub body: Vec<Layer<T>>,
    pub shortcut: Vec<Layer<T>>,
    pub scale: T,
    pub post: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Affine(ChannelAffine<T>),
    Act(Activation),
    MaxPool(Pool),
    AvgPool(Pool),
    GlobalAvgPool,
    Dense(Dense<T>),
    Residual(Residual<T>),
    /// Runs every branch on the same input and stacks the outputs on the
    /// channel axis.
    Concat(Vec<Vec<Layer<T>>>),
    /// Multiplies the input channel-wise by the output of `gate`, which
    /// must reduce the map to `1 × 1 × C`.
    Gate(Vec<Layer<T>>),
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug)]
pub enum Cache<T> {
    None,
    Input(Tensor<T>),
    Shape(Shape),
    Argmax { input: Shape, index: Vec<usize> },
    Residual {
        body: Vec<Cache<T>>,
        shortcut: Vec<Cache<T>>,
        pre: Option<Tensor<T>>,
    },
    Concat { input: Shape, branches: Vec<(usize, Vec<Cache<T>>)> },
    Gate { input: Tensor<T>, gate: Tensor<T>, caches: Vec<Cache<T>> },
}

impl<T: Scalar> Layer<T> {
    /// Output shape for the given input, or a description of the mismatch.
    pub fn output_shape(&self, s: Shape) -> Result<Shape, String> {
        match self {
            Layer::Conv(c) => {
                if s.c != c.in_c {
                    return Err(format!("conv expects {} channels, got {}", c.in_c, s.c));
                }
                let (oh, _) = c.padding.resolve(s.h, c.kh, c.stride).ok_or("conv window larger than input")?;
                let (ow, _) = c.padding.resolve(s.w, c.kw, c.stride).ok_or("conv window larger than input")?;
                Ok(Shape::new(oh, ow, c.out_c))
            }
            Layer::Affine(a) => {
                if s.c != a.scale.len() {
                    return Err(format!("affine expects {} channels, got {}", a.scale.len(), s.c));
                }
                Ok(s)
            }
            Layer::Act(_) => Ok(s),
            Layer::MaxPool(p) | Layer::AvgPool(p) => {
                let (oh, _) = p.padding.resolve(s.h, p.size, p.stride).ok_or("pool window larger than input")?;
                let (ow, _) = p.padding.resolve(s.w, p.size, p.stride).ok_or("pool window larger than input")?;
                Ok(Shape::new(oh, ow, s.c))
            }
            Layer::GlobalAvgPool => Ok(Shape::new(1, 1, s.c)),
            Layer::Dense(d) => {
                if s.len() != d.inputs {
                    return Err(format!("dense expects {} inputs, got {}", d.inputs, s.len()));
                }
                Ok(Shape::new(1, 1, d.outputs))
            }
            Layer::Residual(r) => {
                let body = seq_output_shape(&r.body, s)?;
                let short = seq_output_shape(&r.shortcut, s)?;
                if body != short {
                    return Err(format!("residual branches disagree: {body:?} vs {short:?}"));
                }
                Ok(body)
            }
            Layer::Concat(branches) => {
                let mut out: Option<Shape> = None;
                for b in branches {
                    let bs = seq_output_shape(b, s)?;
                    out = Some(match out {
                        None => bs,
                        Some(o) if o.h == bs.h && o.w == bs.w => Shape::new(o.h, o.w, o.c + bs.c),
                        Some(o) => return Err(format!("concat branches disagree: {o:?} vs {bs:?}")),
                    });
                }
                out.ok_or_else(|| "concat without branches".to_string())
            }
            Layer::Gate(g) => {
                let gs = seq_output_shape(g, s)?;
                if gs != Shape::new(1, 1, s.c) {
                    return Err(format!("gate must produce 1x1x{}, got {gs:?}", s.c));
                }
                Ok(s)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, keep: bool) -> (Tensor<T>, Cache<T>) {
        let keep_input = |x: &Tensor<T>| if keep { Cache::Input(x.clone()) } else { Cache::None };
        match self {
            Layer::Conv(c) => (conv_forward(c, x), keep_input(x)),
            Layer::Affine(a) => {
                let mut y = x.clone();
                for px in y.data.chunks_exact_mut(x.shape.c) {
                    for ((v, &s), &b) in px.iter_mut().zip(&a.scale).zip(&a.shift) {
                        *v = *v * s + b;
                    }
                }
                (y, keep_input(x))
            }
            Layer::Act(act) => {
                let y = Tensor::from_vec(x.shape, x.data.iter().map(|&v| act.apply(v)).collect());
                (y, keep_input(x))
            }
            Layer::MaxPool(p) => {
                let (y, index) = max_pool_forward(p, x);
                (y, if keep { Cache::Argmax { input: x.shape, index } } else { Cache::None })
            }
            Layer::AvgPool(p) => (avg_pool_forward(p, x), Cache::Shape(x.shape)),
            Layer::GlobalAvgPool => {
                let Shape { h, w, c } = x.shape;
                let mut out = vec![T::zero(); c];
                for px in x.data.chunks_exact(c) {
                    out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
                }
                let n = T::of((h * w) as f64);
                out.iter_mut().for_each(|o| *o /= n);
                (Tensor::from_vec(Shape::new(1, 1, c), out), Cache::Shape(x.shape))
            }
            Layer::Dense(d) => {
                let mut out = d.bias.clone();
                for (o, row) in out.iter_mut().zip(d.weight.chunks_exact(d.inputs)) {
                    *o += row.iter().zip(&x.data).map(|(&w, &v)| w * v).sum::<T>();
                }
                (Tensor::from_vec(Shape::new(1, 1, d.outputs), out), keep_input(x))
            }
            Layer::Residual(r) => {
                let (body, body_cache) = forward_seq(&r.body, x, keep);
                let (mut sum, short_cache) = if r.shortcut.is_empty() {
                    (x.clone(), Vec::new())
                } else {
                    forward_seq(&r.shortcut, x, keep)
                };
                sum.data.iter_mut().zip(&body.data).for_each(|(s, &b)| *s += r.scale * b);
                let (out, pre) = match r.post {
                    Some(act) => {
                        let out = Tensor::from_vec(sum.shape, sum.data.iter().map(|&v| act.apply(v)).collect());
                        (out, keep.then_some(sum))
                    }
                    None => (sum, None),
                };
                let cache = if keep {
                    Cache::Residual {
                        body: body_cache,
                        shortcut: short_cache,
                        pre,
                    }
                } else {
                    Cache::None
                };
                (out, cache)
            }
            Layer::Concat(branches) => {
                let outs: Vec<(Tensor<T>, Vec<Cache<T>>)> =
                    branches.iter().map(|b| forward_seq(b, x, keep)).collect();
                let (h, w) = (outs[0].0.shape.h, outs[0].0.shape.w);
                let total: usize = outs.iter().map(|(t, _)| t.shape.c).sum();
                let mut y = Tensor::zeros(Shape::new(h, w, total));
                let mut offset = 0;
                for (t, _) in &outs {
                    let bc = t.shape.c;
                    for (dst, src) in y.data.chunks_exact_mut(total).zip(t.data.chunks_exact(bc)) {
                        dst[offset..offset + bc].copy_from_slice(src);
                    }
                    offset += bc;
                }
                let cache = if keep {
                    Cache::Concat {
                        input: x.shape,
                        branches: outs.into_iter().map(|(t, c)| (t.shape.c, c)).collect(),
                    }
                } else {
                    Cache::None
                };
                (y, cache)
            }
            Layer::Gate(g) => {
                let (gate, caches) = forward_seq(g, x, keep);
                let mut y = x.clone();
                for px in y.data.chunks_exact_mut(x.shape.c) {
                    px.iter_mut().zip(&gate.data).for_each(|(v, &s)| *v *= s);
                }
                let cache = if keep {
                    Cache::Gate {
                        input: x.clone(),
                        gate,
                        caches,
                    }
                } else {
                    Cache::None
                };
                (y, cache)
            }
        }
    }

    /// Propagates `grad` (d loss / d output) back through the layer,
    /// accumulating parameter gradients into `acc`, which must have the same
    /// structure as `self`. Returns d loss / d input.
    pub fn backward(&self, acc: &mut Layer<T>, cache: Cache<T>, grad: Tensor<T>) -> Tensor<T> {
        match (self, acc, cache) {
            (Layer::Conv(c), Layer::Conv(gc), Cache::Input(x)) => conv_backward(c, gc, &x, &grad),
            (Layer::Affine(a), Layer::Affine(ga), Cache::Input(x)) => {
                let ch = x.shape.c;
                let mut gi = grad.clone();
                for ((gpx, xpx), gipx) in grad.data.chunks_exact(ch).zip(x.data.chunks_exact(ch)).zip(gi.data.chunks_exact_mut(ch)) {
                    for k in 0..ch {
                        ga.scale[k] += gpx[k] * xpx[k];
                        ga.shift[k] += gpx[k];
                        gipx[k] = gpx[k] * a.scale[k];
                    }
                }
                gi
            }
            (Layer::Act(act), _, Cache::Input(x)) => Tensor::from_vec(
                x.shape,
                x.data.iter().zip(&grad.data).map(|(&v, &g)| g * act.derivative(v)).collect(),
            ),
            (Layer::MaxPool(_), _, Cache::Argmax { input, index }) => {
                let mut gi = Tensor::zeros(input);
                for (&src, &g) in index.iter().zip(&grad.data) {
                    gi.data[src] += g;
                }
                gi
            }
            (Layer::AvgPool(p), _, Cache::Shape(input)) => avg_pool_backward(p, input, &grad),
            (Layer::GlobalAvgPool, _, Cache::Shape(input)) => {
                let n = T::of((input.h * input.w) as f64);
                let mut gi = Tensor::zeros(input);
                for px in gi.data.chunks_exact_mut(input.c) {
                    px.iter_mut().zip(&grad.data).for_each(|(v, &g)| *v = g / n);
                }
                gi
            }
            (Layer::Dense(d), Layer::Dense(gd), Cache::Input(x)) => {
                let mut gi = Tensor::zeros(x.shape);
                for (o, &g) in grad.data.iter().enumerate() {
                    gd.bias[o] += g;
                    let row = &d.weight[o * d.inputs..(o + 1) * d.inputs];
                    let grow = &mut gd.weight[o * d.inputs..(o + 1) * d.inputs];
                    for i in 0..d.inputs {
                        grow[i] += g * x.data[i];
                        gi.data[i] += g * row[i];
                    }
                }
                gi
            }
            (Layer::Residual(r), Layer::Residual(gr), Cache::Residual { body, shortcut, pre }) => {
                let grad = match (r.post, pre) {
                    (Some(act), Some(pre)) => Tensor::from_vec(
                        grad.shape,
                        pre.data.iter().zip(&grad.data).map(|(&v, &g)| g * act.derivative(v)).collect(),
                    ),
                    _ => grad,
                };
                let body_grad = Tensor::from_vec(grad.shape, grad.data.iter().map(|&g| g * r.scale).collect());
                let mut gi = backward_seq(&r.body, &mut gr.body, body, body_grad);
                let gs = if r.shortcut.is_empty() {
                    grad
                } else {
                    backward_seq(&r.shortcut, &mut gr.shortcut, shortcut, grad)
                };
                gi.add_assign(&gs);
                gi
            }
            (Layer::Concat(branches), Layer::Concat(gbranches), Cache::Concat { input, branches: caches }) => {
                let total = grad.shape.c;
                let mut gi = Tensor::zeros(input);
                let mut offset = 0;
                for ((b, gb), (bc, cache)) in branches.iter().zip(gbranches.iter_mut()).zip(caches) {
                    let mut part = Tensor::zeros(Shape::new(grad.shape.h, grad.shape.w, bc));
                    for (dst, src) in part.data.chunks_exact_mut(bc).zip(grad.data.chunks_exact(total)) {
                        dst.copy_from_slice(&src[offset..offset + bc]);
                    }
                    offset += bc;
                    gi.add_assign(&backward_seq(b, gb, cache, part));
                }
                gi
            }
            (Layer::Gate(g), Layer::Gate(gg), Cache::Gate { input, gate, caches }) => {
                let c = input.shape.c;
                let mut gate_grad = Tensor::zeros(gate.shape);
                let mut gi = grad.clone();
                for ((gpx, xpx), gipx) in grad.data.chunks_exact(c).zip(input.data.chunks_exact(c)).zip(gi.data.chunks_exact_mut(c)) {
                    for k in 0..c {
                        gate_grad.data[k] += gpx[k] * xpx[k];
                        gipx[k] = gpx[k] * gate.data[k];
                    }
                }
                gi.add_assign(&backward_seq(g, gg, caches, gate_grad));
                gi
            }
            (layer, _, cache) => panic!(
                "backward called with mismatched cache or accumulator: {} / {:?}",
                layer.kind(),
                std::mem::discriminant(&cache)
            ),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Affine(_) => "affine",
            Layer::Act(_) => "activation",
            Layer::MaxPool(_) => "max_pool",
            Layer::AvgPool(_) => "avg_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Dense(_) => "dense",
            Layer::Residual(_) => "residual",
            Layer::Concat(_) => "concat",
            Layer::Gate(_) => "gate",
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Vec<T>>) {
        match self {
            Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
            Layer::Affine(a) => out.extend([&a.scale, &a.shift]),
            Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
            Layer::Residual(r) => {
                r.body.iter().chain(&r.shortcut).for_each(|l| l.visit_params(out));
            }
            Layer::Concat(branches) => branches.iter().flatten().for_each(|l| l.visit_params(out)),
            Layer::Gate(g) => g.iter().for_each(|l| l.visit_params(out)),
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::GlobalAvgPool => {}
        }
    }

    pub fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<T>>) {
        match self {
            Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
            Layer::Affine(a) => out.extend([&mut a.scale, &mut a.shift]),
            Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
            Layer::Residual(r) => {
                r.body.iter_mut().chain(r.shortcut.iter_mut()).for_each(|l| l.visit_params_mut(out));
            }
            Layer::Concat(branches) => branches.iter_mut().flatten().for_each(|l| l.visit_params_mut(out)),
            Layer::Gate(g) => g.iter_mut().for_each(|l| l.visit_params_mut(out)),
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::GlobalAvgPool => {}
        }
    }

    /// Calls `f` on this layer and every nested layer, depth first.
    pub fn walk(&self, f: &mut impl FnMut(&Layer<T>)) {
        f(self);
        match self {
            Layer::Residual(r) => r.body.iter().chain(&r.shortcut).for_each(|l| l.walk(f)),
            Layer::Concat(branches) => branches.iter().flatten().for_each(|l| l.walk(f)),
            Layer::Gate(g) => g.iter().for_each(|l| l.walk(f)),
            _ => {}
        }
    }
}

pub fn seq_output_shape<T: Scalar>(layers: &[Layer<T>], input: Shape) -> Result<Shape, String> {
    layers.iter().try_fold(input, |s, l| l.output_shape(s))
}

pub fn forward_seq<T: Scalar>(layers: &[Layer<T>], x: &Tensor<T>, keep: bool) -> (Tensor<T>, Vec<Cache<T>>) {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    let mut cur: Option<Tensor<T>> = None;
    for layer in layers {
        let (y, cache) = layer.forward(cur.as_ref().unwrap_or(x), keep);
        if keep {
            caches.push(cache);
        }
        cur = Some(y);
    }
    (cur.unwrap_or_else(|| x.clone()), caches)
}

pub fn backward_seq<T: Scalar>(
    layers: &[Layer<T>],
    acc: &mut [Layer<T>],
    caches: Vec<Cache<T>>,
    grad: Tensor<T>,
) -> Tensor<T> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut g = grad;
    for ((layer, a), cache) in layers.iter().zip(acc.iter_mut()).zip(caches).rev() {
        g = layer.backward(a, cache, g);
    }
    g
}

fn conv_geometry<T>(c: &Conv2d<T>, s: Shape) -> (usize, usize, usize, usize) {
    let (oh, pt) = c.padding.resolve(s.h, c.kh, c.stride).expect("shape validated at build time");
    let (ow, pl) = c.padding.resolve(s.w, c.kw, c.stride).expect("shape validated at build time");
    (oh, ow, pt, pl)
}

fn conv_forward<T: Scalar>(c: &Conv2d<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let (oh, ow, pt, pl) = conv_geometry(c, s);
    let ipg = c.in_c / c.groups;
    let opg = c.out_c / c.groups;
    let mut out = Tensor::zeros(Shape::new(oh, ow, c.out_c));
    for oy in 0..oh {
        for ox in 0..ow {
            let ob = (oy * ow + ox) * c.out_c;
            out.data[ob..ob + c.out_c].copy_from_slice(&c.bias);
            for ky in 0..c.kh {
                let Some(iy) = (oy * c.stride + ky).checked_sub(pt).filter(|&v| v < s.h) else {
                    continue;
                };
                for kx in 0..c.kw {
                    let Some(ix) = (ox * c.stride + kx).checked_sub(pl).filter(|&v| v < s.w) else {
                        continue;
                    };
                    let ib = (iy * s.w + ix) * s.c;
                    for oc in 0..c.out_c {
                        let ic0 = (oc / opg) * ipg;
                        let wb = ((oc * c.kh + ky) * c.kw + kx) * ipg;
                        let xs = &x.data[ib + ic0..ib + ic0 + ipg];
                        let ws = &c.weight[wb..wb + ipg];
                        out.data[ob + oc] += xs.iter().zip(ws).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(c: &Conv2d<T>, gc: &mut Conv2d<T>, x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let (oh, ow, pt, pl) = conv_geometry(c, s);
    let ipg = c.in_c / c.groups;
    let opg = c.out_c / c.groups;
    let mut gi = Tensor::zeros(s);
    for oy in 0..oh {
        for ox in 0..ow {
            let ob = (oy * ow + ox) * c.out_c;
            let go = &grad.data[ob..ob + c.out_c];
            gc.bias.iter_mut().zip(go).for_each(|(b, &g)| *b += g);
            for ky in 0..c.kh {
                let Some(iy) = (oy * c.stride + ky).checked_sub(pt).filter(|&v| v < s.h) else {
                    continue;
                };
                for kx in 0..c.kw {
                    let Some(ix) = (ox * c.stride + kx).checked_sub(pl).filter(|&v| v < s.w) else {
                        continue;
                    };
                    let ib = (iy * s.w + ix) * s.c;
                    for (oc, &g) in go.iter().enumerate() {
                        if g == T::zero() {
                            continue;
                        }
                        let ic0 = (oc / opg) * ipg;
                        let wb = ((oc * c.kh + ky) * c.kw + kx) * ipg;
                        for i in 0..ipg {
                            gc.weight[wb + i] += g * x.data[ib + ic0 + i];
                            gi.data[ib + ic0 + i] += g * c.weight[wb + i];
                        }
                    }
                }
            }
        }
    }
    gi
}

fn max_pool_forward<T: Scalar>(p: &Pool, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape;
    let (oh, pt) = p.padding.resolve(s.h, p.size, p.stride).expect("validated");
    let (ow, pl) = p.padding.resolve(s.w, p.size, p.stride).expect("validated");
    let mut out = Tensor::zeros(Shape::new(oh, ow, s.c));
    let mut index = vec![0usize; oh * ow * s.c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..s.c {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..p.size {
                    let Some(iy) = (oy * p.stride + ky).checked_sub(pt).filter(|&v| v < s.h) else {
                        continue;
                    };
                    for kx in 0..p.size {
                        let Some(ix) = (ox * p.stride + kx).checked_sub(pl).filter(|&v| v < s.w) else {
                            continue;
                        };
                        let i = (iy * s.w + ix) * s.c + ch;
                        if best_i == usize::MAX || x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * s.c + ch;
                out.data[o] = best;
                index[o] = best_i;
            }
        }
    }
    (out, index)
}

/// Visits each output cell with the flat input offsets of its window
/// (padding excluded from the count).
fn avg_pool_windows(p: &Pool, s: Shape, mut f: impl FnMut(usize, &[usize])) {
    let (oh, pt) = p.padding.resolve(s.h, p.size, p.stride).expect("validated");
    let (ow, pl) = p.padding.resolve(s.w, p.size, p.stride).expect("validated");
    let mut window = Vec::with_capacity(p.size * p.size);
    for oy in 0..oh {
        for ox in 0..ow {
            window.clear();
            for ky in 0..p.size {
                let Some(iy) = (oy * p.stride + ky).checked_sub(pt).filter(|&v| v < s.h) else {
                    continue;
                };
                for kx in 0..p.size {
                    if let Some(ix) = (ox * p.stride + kx).checked_sub(pl).filter(|&v| v < s.w) {
                        window.push((iy * s.w + ix) * s.c);
                    }
                }
            }
            f((oy * ow + ox) * s.c, &window);
        }
    }
}

fn avg_pool_forward<T: Scalar>(p: &Pool, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let mut out = Tensor::zeros(Layer::<T>::AvgPool(*p).output_shape(s).expect("validated"));
    avg_pool_windows(p, s, |ob, window| {
        let n = T::of(window.len() as f64);
        for ch in 0..s.c {
            out.data[ob + ch] = window.iter().map(|&ib| x.data[ib + ch]).sum::<T>() / n;
        }
    });
    out
}

fn avg_pool_backward<T: Scalar>(p: &Pool, input: Shape, grad: &Tensor<T>) -> Tensor<T> {
    let mut gi = Tensor::zeros(input);
    avg_pool_windows(p, input, |ob, window| {
        let n = T::of(window.len() as f64);
        for ch in 0..input.c {
            let g = grad.data[ob + ch] / n;
            window.iter().for_each(|&ib| gi.data[ib + ch] += g);
        }
    });
    gi
}

/// Flat parameter views in canonical order.
pub fn params_of<T: Scalar>(layers: &[Layer<T>]) -> Vec<&Vec<T>> {
    let mut out = Vec::new();
    layers.iter().for_each(|l| l.visit_params(&mut out));
    out
}

pub fn params_of_mut<T: Scalar>(layers: &mut [Layer<T>]) -> Vec<&mut Vec<T>> {
    let mut out = Vec::new();
    layers.iter_mut().for_each(|l| l.visit_params_mut(&mut out));
    out
}

/// A copy of `layers` with every parameter set to zero, used as a gradient
/// accumulator.
pub fn zeros_like<T: Scalar>(layers: &[Layer<T>]) -> Vec<Layer<T>> {
    let mut z = layers.to_vec();
    params_of_mut(&mut z).into_iter().for_each(|p| p.iter_mut().for_each(|v| *v = T::zero()));
    z
}

/// Incrementally assembles a network while tracking the feature-map shape.
///
/// Shape errors are remembered and reported by [`NetBuilder::finish`], so
/// topology code can be written as straight-line calls.
pub struct NetBuilder<'r, T> {
    rng: &'r mut ChaCha8Rng,
    shape: Shape,
    layers: Vec<Layer<T>>,
    error: Option<String>,
}

impl<'r, T: Scalar> NetBuilder<'r, T> {
    pub fn new(rng: &'r mut ChaCha8Rng, input: Shape) -> Self {
        Self {
            rng,
            shape: input,
            layers: Vec::new(),
            error: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// A builder for a side branch starting from the current shape.
    pub fn fork(&mut self) -> NetBuilder<'_, T> {
        NetBuilder {
            rng: &mut *self.rng,
            shape: self.shape,
            layers: Vec::new(),
            error: None,
        }
    }

    pub fn push(&mut self, layer: Layer<T>) -> &mut Self {
        match layer.output_shape(self.shape) {
            Ok(s) => self.shape = s,
            Err(e) => {
                self.error.get_or_insert(e);
            }
        }
        self.layers.push(layer);
        self
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                T::of(z * std)
            })
            .collect()
    }

    pub fn conv(&mut self, out_c: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> &mut Self {
        self.grouped_conv(out_c, kh, kw, stride, padding, 1)
    }

    pub fn depthwise(&mut self, k: usize, stride: usize) -> &mut Self {
        let c = self.shape.c;
        self.grouped_conv(c, k, k, stride, Padding::Same, c)
    }

    pub fn grouped_conv(
        &mut self,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> &mut Self {
        let in_c = self.shape.c;
        if in_c % groups != 0 || out_c % groups != 0 {
            self.error.get_or_insert(format!("{in_c}→{out_c} channels not divisible into {groups} groups"));
        }
        let ipg = (in_c / groups).max(1);
        let fan_in = (kh * kw * ipg) as f64;
        let weight = self.normal(out_c * kh * kw * ipg, (2.0 / fan_in).sqrt());
        self.push(Layer::Conv(Conv2d {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            padding,
            groups,
            weight,
            bias: vec![T::zero(); out_c],
        }))
    }

    /// Folded-normalisation affine with the given initial scale.
    pub fn affine(&mut self, init_scale: f64) -> &mut Self {
        let c = self.shape.c;
        self.push(Layer::Affine(ChannelAffine {
            scale: vec![T::of(init_scale); c],
            shift: vec![T::zero(); c],
        }))
    }

    pub fn act(&mut self, a: Activation) -> &mut Self {
        self.push(Layer::Act(a))
    }

    /// Convolution, affine, then activation: the unit most backbones repeat.
    pub fn conv_unit(
        &mut self,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        act: Activation,
    ) -> &mut Self {
        self.conv(out_c, kh, kw, stride, padding).affine(1.0).act(act)
    }

    pub fn max_pool(&mut self, size: usize, stride: usize, padding: Padding) -> &mut Self {
        self.push(Layer::MaxPool(Pool { size, stride, padding }))
    }

    pub fn avg_pool(&mut self, size: usize, stride: usize, padding: Padding) -> &mut Self {
        self.push(Layer::AvgPool(Pool { size, stride, padding }))
    }

    pub fn global_avg_pool(&mut self) -> &mut Self {
        self.push(Layer::GlobalAvgPool)
    }

    /// Fully connected layer with weights drawn at `gain / sqrt(fan_in)`.
    pub fn dense(&mut self, outputs: usize, gain: f64) -> &mut Self {
        let inputs = self.shape.len();
        let weight = self.normal(outputs * inputs, gain / (inputs as f64).sqrt());
        self.push(Layer::Dense(Dense {
            inputs,
            outputs,
            weight,
            bias: vec![T::zero(); outputs],
        }))
    }

    pub fn finish(self) -> Result<(Vec<Layer<T>>, Shape), String> {
        match self.error {
            Some(e) => Err(e),
            None => Ok((self.layers, self.shape)),
        }
    }

    /// Appends a finished side branch's error (if any) to this builder.
    pub fn absorb(&mut self, branch: Result<(Vec<Layer<T>>, Shape), String>) -> Vec<Layer<T>> {
        match branch {
            Ok((layers, _)) => layers,
            Err(e) => {
                self.error.get_or_insert(e);
                Vec::new()
            }
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.len()).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// Loss = Σ w_i · y_i with fixed pseudo-random weights, so every output
    /// contributes a distinct gradient.
    fn probe_loss(y: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let w: Vec<f64> = (0..y.data.len()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let loss = y.data.iter().zip(&w).map(|(a, b)| a * b).sum();
        (loss, Tensor::from_vec(y.shape, w))
    }

    /// Central-difference check of both input and parameter gradients.
    fn check_gradients(layers: Vec<Layer<f64>>, input: Shape) {
        let x = random_tensor(input, 3);
        let (y, caches) = forward_seq(&layers, &x, true);
        let (_, gy) = probe_loss(&y);
        let mut acc = zeros_like(&layers);
        let gx = backward_seq(&layers, &mut acc, caches, gy);
        let eps = 1e-6;
        let loss_at = |ls: &[Layer<f64>], x: &Tensor<f64>| probe_loss(&forward_seq(ls, x, false).0).0;

        for i in (0..x.data.len()).step_by((x.data.len() / 23).max(1)) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let numeric = (loss_at(&layers, &xp) - loss_at(&layers, &xm)) / (2.0 * eps);
            assert_close(gx.data[i], numeric, &format!("input[{i}]"));
        }

        let analytic: Vec<Vec<f64>> = params_of(&acc).into_iter().cloned().collect();
        for (p, grads) in analytic.iter().enumerate() {
            for i in (0..grads.len()).step_by((grads.len() / 7).max(1)) {
                let mut plus = layers.clone();
                params_of_mut(&mut plus)[p][i] += eps;
                let mut minus = layers.clone();
                params_of_mut(&mut minus)[p][i] -= eps;
                let numeric = (loss_at(&plus, &x) - loss_at(&minus, &x)) / (2.0 * eps);
                assert_close(grads[i], numeric, &format!("param {p}[{i}]"));
            }
        }
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom < 1e-5,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn same_and_valid_padding_sizes() {
        assert_eq!(Padding::Same.resolve(299, 3, 2), Some((150, 1)));
        assert_eq!(Padding::Same.resolve(224, 7, 2), Some((112, 2)));
        assert_eq!(Padding::Valid.resolve(299, 3, 2), Some((149, 0)));
        assert_eq!(Padding::Valid.resolve(2, 3, 1), None);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1-channel 3x3 input, 2x2 kernel of ones, valid: window sums
        let conv = Layer::Conv(Conv2d {
            in_c: 1,
            out_c: 1,
            kh: 2,
            kw: 2,
            stride: 1,
            padding: Padding::Valid,
            groups: 1,
            weight: vec![1.0; 4],
            bias: vec![0.5],
        });
        let x = Tensor::from_vec(Shape::new(3, 3, 1), (1..=9).map(f64::from).collect());
        let (y, _) = conv.forward(&x, false);
        assert_eq!(y.shape, Shape::new(2, 2, 1));
        assert_eq!(y.data, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn max_pool_same_padding_ignores_border() {
        let x = Tensor::from_vec(Shape::new(2, 2, 1), vec![-4.0, -3.0, -2.0, -1.0]);
        let (y, _) = Layer::MaxPool(Pool { size: 3, stride: 2, padding: Padding::Same }).forward(&x, false);
        assert_eq!(y.data, vec![-1.0]);
    }

    #[test]
    fn gradients_conv_affine_activations() {
        let mut r = rng();
        let mut b = NetBuilder::<f64>::new(&mut r, Shape::new(7, 6, 3));
        b.conv(4, 3, 3, 2, Padding::Same).affine(1.3).act(Activation::Silu);
        b.conv(4, 1, 3, 1, Padding::Valid).act(Activation::Sigmoid);
        b.depthwise(3, 1).act(Activation::Relu);
        let (layers, _) = b.finish().unwrap();
        check_gradients(layers, Shape::new(7, 6, 3));
    }

    #[test]
    fn gradients_pools_and_dense() {
        let mut r = rng();
        let mut b = NetBuilder::<f64>::new(&mut r, Shape::new(9, 9, 2));
        b.conv(3, 3, 3, 1, Padding::Same);
        b.max_pool(3, 2, Padding::Valid).avg_pool(3, 1, Padding::Same);
        b.global_avg_pool().dense(5, 1.0).act(Activation::Silu).dense(2, 1.0);
        let (layers, _) = b.finish().unwrap();
        check_gradients(layers, Shape::new(9, 9, 2));
    }

    #[test]
    fn gradients_residual_concat_gate() {
        let mut r = rng();
        let input = Shape::new(6, 6, 4);
        let mut b = NetBuilder::<f64>::new(&mut r, input);
        let left = {
            let mut f = b.fork();
            f.conv(2, 1, 1, 1, Padding::Same);
            f.finish()
        };
        let right = {
            let mut f = b.fork();
            f.conv(3, 3, 3, 1, Padding::Same).act(Activation::Silu);
            f.finish()
        };
        let (left, right) = (b.absorb(left), b.absorb(right));
        let up = {
            let mut f = b.fork();
            f.push(Layer::Concat(vec![left, right]));
            f.conv(4, 1, 1, 1, Padding::Same);
            f.finish()
        };
        let body = b.absorb(up);
        b.push(Layer::Residual(Residual { body, shortcut: Vec::new(), scale: 0.3, post: Some(Activation::Silu) }));
        let gate = {
            let mut f = b.fork();
            f.global_avg_pool().dense(2, 1.0).act(Activation::Silu).dense(4, 1.0).act(Activation::Sigmoid);
            f.finish()
        };
        let gate = b.absorb(gate);
        b.push(Layer::Gate(gate));
        let projection = {
            let mut f = b.fork();
            f.conv(5, 1, 1, 2, Padding::Same).affine(0.7);
            f.finish()
        };
        let body = {
            let mut f = b.fork();
            f.conv(5, 3, 3, 2, Padding::Same).affine(1.0);
            f.finish()
        };
        let (shortcut, body) = (b.absorb(projection), b.absorb(body));
        b.push(Layer::Residual(Residual { body, shortcut, scale: 1.0, post: Some(Activation::Sigmoid) }));
        let (layers, out) = b.finish().unwrap();
        assert_eq!(out, Shape::new(3, 3, 5));
        check_gradients(layers, input);
    }

    #[test]
    fn builder_reports_shape_errors() {
        let mut r = rng();
        let mut b = NetBuilder::<f32>::new(&mut r, Shape::new(4, 4, 3));
        b.conv(8, 5, 5, 1, Padding::Valid);
        assert!(b.finish().unwrap_err().contains("window"));
    }

    #[test]
    fn logistic_is_stable_at_extremes() {
        assert_eq!(logistic(-800.0f64), 0.0);
        assert_eq!(logistic(800.0f64), 1.0);
        assert!(logistic(-500.0f32).is_finite());
    }
}
