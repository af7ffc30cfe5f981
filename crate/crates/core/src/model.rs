//! Backbone registry, binary classification head and output activations.
//!
//! Every public prediction is `probability_fake`. The single-neuron head
//! models the probability that the input is real and is flipped on the way
//! out; the two-logit head orders its components `[real, fake]`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    backward_seq, forward_seq, params_of, params_of_mut, zeros_like, Activation, Layer, NetBuilder, Padding,
    Residual, Shape, Tensor,
};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone `{0}` (known: resnet50, efficientnet_b0, inception_resnet_v2, tiny_test)")]
    UnknownBackbone(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input size mismatch: expected {expected} values for a batch of {batch} at {side}x{side}x3, got {got}")]
    InputSize {
        expected: usize,
        got: usize,
        batch: usize,
        side: u32,
    },
    #[error("softmax of an empty vector")]
    EmptyVector,
    #[error("parameter blob has {got} values, the network needs {expected}")]
    ParameterCount { expected: usize, got: usize },
}

/// Logistic sigmoid `1 / (1 + e^(-x))`, evaluated without overflow.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    crate::nn::logistic(x)
}

/// A vector of logits or probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector<T>(pub Vec<T>);

impl<T: Scalar> ProbabilityVector<T> {
    pub fn components(&self) -> &[T] {
        &self.0
    }

    pub fn sum(&self) -> T {
        self.0.iter().copied().sum()
    }

    /// Index of the largest component (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, T)>, (i, &v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    }
}

/// `e^(z_i) / Σ_j e^(z_j)`, computed after subtracting `max(z)`.
pub fn softmax<T: Scalar>(z: &[T]) -> Result<ProbabilityVector<T>, ModelError> {
    let max = z.iter().copied().reduce(T::max).ok_or(ModelError::EmptyVector)?;
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(ProbabilityVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet50,
    EfficientnetB0,
    InceptionResnetV2,
    /// Two-convolution network for hermetic tests and toy corpora.
    TinyTest,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [
        Backbone::Resnet50,
        Backbone::EfficientnetB0,
        Backbone::InceptionResnetV2,
        Backbone::TinyTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::EfficientnetB0 => "efficientnet_b0",
            Backbone::InceptionResnetV2 => "inception_resnet_v2",
            Backbone::TinyTest => "tiny_test",
        }
    }

    pub fn spec(self) -> BackboneSpec {
        let (input_size, nominal_depth) = match self {
            Backbone::Resnet50 => (224, Some(50)),
            Backbone::EfficientnetB0 => (224, None),
            Backbone::InceptionResnetV2 => (299, Some(164)),
            Backbone::TinyTest => (64, Some(4)),
        };
        BackboneSpec {
            name: self,
            input_size,
            nominal_depth,
            pretrained: false,
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.as_str() == s.trim())
            .ok_or_else(|| ModelError::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: Backbone,
    /// Native square input side in pixels.
    pub input_size: u32,
    /// Published layer count; `None` where no figure is given.
    pub nominal_depth: Option<u32>,
    /// Whether externally supplied weights were bound.
    pub pretrained: bool,
}

pub fn backbone_spec(name: &str) -> Result<BackboneSpec, ModelError> {
    Ok(name.parse::<Backbone>()?.spec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOutput {
    /// One neuron, `sigmoid(z)` = probability the input is real.
    #[serde(rename = "sigmoid_1")]
    Sigmoid1,
    /// Two logits `[real, fake]` through softmax.
    #[default]
    #[serde(rename = "softmax_2")]
    Softmax2,
}

impl HeadOutput {
    pub fn units(self) -> usize {
        match self {
            HeadOutput::Sigmoid1 => 1,
            HeadOutput::Softmax2 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadOutput::Sigmoid1 => "sigmoid_1",
            HeadOutput::Softmax2 => "softmax_2",
        }
    }
}

impl FromStr for HeadOutput {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "sigmoid_1" => Ok(HeadOutput::Sigmoid1),
            "softmax_2" => Ok(HeadOutput::Softmax2),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown head output `{other}` (expected sigmoid_1 or softmax_2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub head_hidden_units: usize,
    pub head_output: HeadOutput,
    /// Channel multiplier applied to every backbone layer. 1.0 is the
    /// reference topology.
    pub width_multiplier: f64,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone: backbone.spec(),
            head_hidden_units: 64,
            head_output: HeadOutput::default(),
            width_multiplier: 1.0,
            init_seed: 0,
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self
    }

    pub fn with_head(mut self, head: HeadOutput, hidden: usize) -> Self {
        self.head_output = head;
        self.head_hidden_units = hidden;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.head_hidden_units == 0 {
            return Err(ModelError::InvalidConfig("head_hidden_units must be at least 1".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let native = self.backbone.name.spec();
        if self.backbone.input_size != native.input_size || self.backbone.nominal_depth != native.nominal_depth {
            return Err(ModelError::InvalidConfig(format!(
                "{} constants do not match the registry",
                self.backbone.name
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> u32 {
        self.backbone.input_size
    }
}

/// Flat per-parameter-tensor gradients in the network's canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Gradient<T> {
    pub fn add_assign(&mut self, other: &Gradient<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: T) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

/// Backbone feature extractor plus dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    config: ModelConfig,
    backbone: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
}

/// Builds a freshly initialised classifier for `config`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Classifier<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let side = config.input_size() as usize;
    let mut b = NetBuilder::<T>::new(&mut rng, Shape::new(side, side, 3));
    let width = config.width_multiplier;
    match config.backbone.name {
        Backbone::TinyTest => tiny_test(&mut b),
        Backbone::Resnet50 => resnet50(&mut b, width),
        Backbone::EfficientnetB0 => efficientnet_b0(&mut b, width),
        Backbone::InceptionResnetV2 => inception_resnet_v2(&mut b, width),
    }
    let (backbone, features) = b.finish().map_err(ModelError::InvalidConfig)?;

    let mut h = NetBuilder::<T>::new(&mut rng, features);
    h.dense(config.head_hidden_units, 2f64.sqrt())
        .act(Activation::Relu)
        .dense(config.head_output.units(), 1.0);
    let (head, _) = h.finish().map_err(ModelError::InvalidConfig)?;

    Ok(Classifier {
        config: config.clone(),
        backbone,
        head,
    })
}

impl<T: Scalar> Classifier<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_size(&self) -> u32 {
        self.config.input_size()
    }

    pub fn sample_len(&self) -> usize {
        let s = self.input_size() as usize;
        s * s * 3
    }

    pub fn backbone_layers(&self) -> &[Layer<T>] {
        &self.backbone
    }

    pub fn head_layers(&self) -> &[Layer<T>] {
        &self.head
    }

    fn input_tensor(&self, sample: &[T]) -> Tensor<T> {
        let s = self.input_size() as usize;
        Tensor::from_vec(Shape::new(s, s, 3), sample.to_vec())
    }

    /// Raw head outputs for one preprocessed sample.
    pub fn logits(&self, sample: &[T]) -> Vec<T> {
        let x = self.input_tensor(sample);
        let (features, _) = forward_seq(&self.backbone, &x, false);
        forward_seq(&self.head, &features, false).0.data
    }

    /// The fake-class logit `u` with `probability_fake = sigmoid(u)`.
    fn fake_logit(&self, logits: &[T]) -> T {
        match self.config.head_output {
            HeadOutput::Sigmoid1 => -logits[0],
            HeadOutput::Softmax2 => logits[1] - logits[0],
        }
    }

    pub fn probability_from_logits(&self, logits: &[T]) -> T {
        match self.config.head_output {
            HeadOutput::Sigmoid1 => T::one() - sigmoid(logits[0]),
            HeadOutput::Softmax2 => softmax(logits).expect("two logits").0[1],
        }
    }

    /// Probability that the sample is counterfeit.
    pub fn probability_fake(&self, sample: &[T]) -> T {
        self.probability_from_logits(&self.logits(sample))
    }

    /// Scores a `batch × S × S × 3` block of preprocessed pixels.
    pub fn predict(&self, pixels: &[T], batch: usize) -> Result<Vec<T>, ModelError> {
        let per = self.sample_len();
        if pixels.len() != per * batch {
            return Err(ModelError::InputSize {
                expected: per * batch,
                got: pixels.len(),
                batch,
                side: self.input_size(),
            });
        }
        Ok(pixels.par_chunks(per).map(|s| self.probability_fake(s)).collect())
    }

    /// Binary cross-entropy of `probability_fake` against `target` (0 or 1)
    /// and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, sample: &[T], target: T) -> (T, T, Gradient<T>) {
        let x = self.input_tensor(sample);
        let (features, bcache) = forward_seq(&self.backbone, &x, true);
        let (out, hcache) = forward_seq(&self.head, &features, true);
        let u = self.fake_logit(&out.data);
        let p = sigmoid(u);
        let loss = softplus(u) - target * u;
        let du = p - target;
        let dlogits = match self.config.head_output {
            HeadOutput::Sigmoid1 => vec![-du],
            HeadOutput::Softmax2 => vec![-du, du],
        };
        let mut head_acc = zeros_like(&self.head);
        let gf = backward_seq(&self.head, &mut head_acc, hcache, Tensor::from_vec(out.shape, dlogits));
        let mut back_acc = zeros_like(&self.backbone);
        backward_seq(&self.backbone, &mut back_acc, bcache, gf);
        let grads = params_of(&back_acc)
            .into_iter()
            .chain(params_of(&head_acc))
            .cloned()
            .collect();
        (loss, p, Gradient(grads))
    }

    /// Parameter tensors, backbone first, in canonical order.
    pub fn params(&self) -> Vec<&Vec<T>> {
        let mut p = params_of(&self.backbone);
        p.extend(params_of(&self.head));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut p = params_of_mut(&mut self.backbone);
        p.extend(params_of_mut(&mut self.head));
        p
    }

    /// Number of parameter tensors belonging to the backbone; the head's
    /// tensors follow them in [`Classifier::params`].
    pub fn backbone_tensor_count(&self) -> usize {
        params_of(&self.backbone).len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params().into_iter().flatten().copied().collect()
    }

    /// Overwrites all parameters from a flat vector in canonical order.
    pub fn set_flat_params(&mut self, values: &[T]) -> Result<(), ModelError> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(ModelError::ParameterCount {
                expected,
                got: values.len(),
            });
        }
        let mut rest = values;
        for p in self.params_mut() {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Replaces the backbone parameters with externally trained ones and
    /// marks the backbone as pretrained.
    pub fn bind_backbone_weights(&mut self, values: &[T]) -> Result<(), ModelError> {
        let params = params_of_mut(&mut self.backbone);
        let expected: usize = params.iter().map(|p| p.len()).sum();
        if values.len() != expected {
            return Err(ModelError::ParameterCount {
                expected,
                got: values.len(),
            });
        }
        let mut rest = values;
        for p in params {
            let (head, tail) = rest.split_at(p.len());
            p.copy_from_slice(head);
            rest = tail;
        }
        self.config.backbone.pretrained = true;
        Ok(())
    }

    pub fn set_pretrained(&mut self, pretrained: bool) {
        self.config.backbone.pretrained = pretrained;
    }
}

fn channels(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

fn tiny_test<T: Scalar>(b: &mut NetBuilder<'_, T>) {
    b.conv_unit(8, 3, 3, 2, Padding::Same, Activation::Relu)
        .conv_unit(16, 3, 3, 2, Padding::Same, Activation::Relu)
        .global_avg_pool();
}

/// Bottleneck residual network: 7×7 stem, then 3/4/6/3 bottleneck blocks.
fn resnet50<T: Scalar>(b: &mut NetBuilder<'_, T>, width: f64) {
    let ch = |c| channels(c, width);
    b.conv_unit(ch(64), 7, 7, 2, Padding::Same, Activation::Relu)
        .max_pool(3, 2, Padding::Same);
    for (mid, out, blocks, stride) in [(64, 256, 3, 1), (128, 512, 4, 2), (256, 1024, 6, 2), (512, 2048, 3, 2)] {
        for i in 0..blocks {
            let s = if i == 0 { stride } else { 1 };
            let body = {
                let mut f = b.fork();
                f.conv_unit(ch(mid), 1, 1, 1, Padding::Same, Activation::Relu)
                    .conv_unit(ch(mid), 3, 3, s, Padding::Same, Activation::Relu)
                    .conv(ch(out), 1, 1, 1, Padding::Same)
                    // residual branch starts at zero so the block begins as its shortcut
                    .affine(0.0);
                f.finish()
            };
            let shortcut = if i == 0 {
                let mut f = b.fork();
                f.conv(ch(out), 1, 1, s, Padding::Same).affine(1.0);
                f.finish()
            } else {
                Ok((Vec::new(), b.shape()))
            };
            let (body, shortcut) = (b.absorb(body), b.absorb(shortcut));
            b.push(Layer::Residual(Residual {
                body,
                shortcut,
                scale: T::one(),
                post: Some(Activation::Relu),
            }));
        }
    }
    b.global_avg_pool();
}

/// Mobile inverted-bottleneck network with squeeze-and-excitation gates.
fn efficientnet_b0<T: Scalar>(b: &mut NetBuilder<'_, T>, width: f64) {
    let ch = |c| channels(c, width);
    b.conv_unit(ch(32), 3, 3, 2, Padding::Same, Activation::Silu);
    // (expansion, kernel, stride, output channels, repeats)
    let stages = [
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    ];
    for (expand, k, stride, out, repeats) in stages {
        for i in 0..repeats {
            let s = if i == 0 { stride } else { 1 };
            let in_c = b.shape().c;
            let out_c = ch(out);
            let residual = s == 1 && in_c == out_c;
            let body = {
                let mut f = b.fork();
                if expand != 1 {
                    f.conv_unit(in_c * expand, 1, 1, 1, Padding::Same, Activation::Silu);
                }
                f.depthwise(k, s).affine(1.0).act(Activation::Silu);
                let gate = {
                    let mut g = f.fork();
                    g.global_avg_pool()
                        .dense((in_c / 4).max(1), 2f64.sqrt())
                        .act(Activation::Silu)
                        .dense(in_c * expand, 1.0)
                        .act(Activation::Sigmoid);
                    g.finish()
                };
                let gate = f.absorb(gate);
                f.push(Layer::Gate(gate));
                f.conv(out_c, 1, 1, 1, Padding::Same)
                    .affine(if residual { 0.0 } else { 1.0 });
                f.finish()
            };
            let body = b.absorb(body);
            if residual {
                b.push(Layer::Residual(Residual {
                    body,
                    shortcut: Vec::new(),
                    scale: T::one(),
                    post: None,
                }));
            } else {
                for layer in body {
                    b.push(layer);
                }
            }
        }
    }
    b.conv_unit(ch(1280), 1, 1, 1, Padding::Same, Activation::Silu)
        .global_avg_pool();
}

/// Appends one branch (a list of conv units) for an inception module.
fn branch<T: Scalar>(b: &mut NetBuilder<'_, T>, units: &[(usize, usize, usize, usize, Padding)]) -> Vec<Layer<T>> {
    let built = {
        let mut f = b.fork();
        for &(c, kh, kw, s, p) in units {
            f.conv_unit(c, kh, kw, s, p, Activation::Relu);
        }
        f.finish()
    };
    b.absorb(built)
}

fn pooled_branch<T: Scalar>(b: &mut NetBuilder<'_, T>, max: bool, then: Option<usize>) -> Vec<Layer<T>> {
    let built = {
        let mut f = b.fork();
        if max {
            f.max_pool(3, 2, Padding::Valid);
        } else {
            f.avg_pool(3, 1, Padding::Same);
        }
        if let Some(c) = then {
            f.conv_unit(c, 1, 1, 1, Padding::Same, Activation::Relu);
        }
        f.finish()
    };
    b.absorb(built)
}

/// Inception-ResNet block: parallel conv branches, concatenated, projected
/// back to the input width by a linear 1×1 conv and added with `scale`.
fn inception_residual<T: Scalar>(
    b: &mut NetBuilder<'_, T>,
    branches: &[&[(usize, usize, usize, usize, Padding)]],
    scale: f64,
    activate: bool,
) {
    let in_c = b.shape().c;
    let body = {
        let mut f = b.fork();
        let parts: Vec<_> = branches.iter().map(|units| branch(&mut f, units)).collect();
        f.push(Layer::Concat(parts));
        f.conv(in_c, 1, 1, 1, Padding::Same);
        f.finish()
    };
    let body = b.absorb(body);
    b.push(Layer::Residual(Residual {
        body,
        shortcut: Vec::new(),
        scale: T::of(scale),
        post: activate.then_some(Activation::Relu),
    }));
}

/// Inception-ResNet-v2: stem to 35×35, 10 × block A, reduction, 20 × block
/// B, reduction, 10 × block C, 1×1 expansion.
fn inception_resnet_v2<T: Scalar>(b: &mut NetBuilder<'_, T>, width: f64) {
    use Padding::{Same, Valid};
    let ch = |c| channels(c, width);
    let relu = Activation::Relu;
    b.conv_unit(ch(32), 3, 3, 2, Valid, relu)
        .conv_unit(ch(32), 3, 3, 1, Valid, relu)
        .conv_unit(ch(64), 3, 3, 1, Same, relu)
        .max_pool(3, 2, Valid)
        .conv_unit(ch(80), 1, 1, 1, Valid, relu)
        .conv_unit(ch(192), 3, 3, 1, Valid, relu)
        .max_pool(3, 2, Valid);

    let mixed_5b = vec![
        branch(b, &[(ch(96), 1, 1, 1, Same)]),
        branch(b, &[(ch(48), 1, 1, 1, Same), (ch(64), 5, 5, 1, Same)]),
        branch(b, &[(ch(64), 1, 1, 1, Same), (ch(96), 3, 3, 1, Same), (ch(96), 3, 3, 1, Same)]),
        pooled_branch(b, false, Some(ch(64))),
    ];
    b.push(Layer::Concat(mixed_5b));

    for _ in 0..10 {
        inception_residual(
            b,
            &[
                &[(ch(32), 1, 1, 1, Same)],
                &[(ch(32), 1, 1, 1, Same), (ch(32), 3, 3, 1, Same)],
                &[(ch(32), 1, 1, 1, Same), (ch(48), 3, 3, 1, Same), (ch(64), 3, 3, 1, Same)],
            ],
            0.17,
            true,
        );
    }

    let mixed_6a = vec![
        branch(b, &[(ch(384), 3, 3, 2, Valid)]),
        branch(b, &[(ch(256), 1, 1, 1, Same), (ch(256), 3, 3, 1, Same), (ch(384), 3, 3, 2, Valid)]),
        pooled_branch(b, true, None),
    ];
    b.push(Layer::Concat(mixed_6a));

    for _ in 0..20 {
        inception_residual(
            b,
            &[
                &[(ch(192), 1, 1, 1, Same)],
                &[(ch(128), 1, 1, 1, Same), (ch(160), 1, 7, 1, Same), (ch(192), 7, 1, 1, Same)],
            ],
            0.1,
            true,
        );
    }

    let mixed_7a = vec![
        branch(b, &[(ch(256), 1, 1, 1, Same), (ch(384), 3, 3, 2, Valid)]),
        branch(b, &[(ch(256), 1, 1, 1, Same), (ch(288), 3, 3, 2, Valid)]),
        branch(b, &[(ch(256), 1, 1, 1, Same), (ch(288), 3, 3, 1, Same), (ch(320), 3, 3, 2, Valid)]),
        pooled_branch(b, true, None),
    ];
    b.push(Layer::Concat(mixed_7a));

    for i in 0..10 {
        let last = i == 9;
        inception_residual(
            b,
            &[
                &[(ch(192), 1, 1, 1, Same)],
                &[(ch(192), 1, 1, 1, Same), (ch(224), 1, 3, 1, Same), (ch(256), 3, 1, 1, Same)],
            ],
            if last { 1.0 } else { 0.2 },
            !last,
        );
    }
    b.conv_unit(ch(1536), 1, 1, 1, Same, relu).global_avg_pool();
}
