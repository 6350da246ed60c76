//! Layers with binary masks, networks, and forward propagation.
//!
//! Pruned parameters are never removed from the tensors. A cleared mask bit
//! pins the matching parameter to exactly zero, so shapes stay stable across
//! pruning iterations.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, im2col, transpose, ConvGeometry, Tensor};

pub use io::{load_model, save_model, MODEL_BLOB_FILE, MODEL_MANIFEST_FILE};

/// Batch size used when a forward pass does not need to keep activations.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Relu,
        Activation::Elu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `pre`, given `post = apply(pre)`.
    #[inline]
    pub fn derivative<T: Scalar>(self, pre: T, post: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    post + T::one()
                }
            }
            Activation::Sigmoid => post * (T::one() - post),
            Activation::Tanh => T::one() - post * post,
            Activation::Identity => T::one(),
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation {s:?}")))
    }
}

/// A layer whose outputs are built from prunable contributors.
///
/// Contributor indices `0..contributors()` address incoming connections (or
/// kernels); index `contributors()` addresses the bias.
pub trait Prunable {
    fn targets(&self) -> usize;

    /// Incoming contributors per target, excluding the bias.
    fn contributors(&self) -> usize;

    fn is_active(&self, target: usize, contributor: usize) -> bool;

    /// Clears the mask of the listed contributors of `target` and zeroes them.
    fn prune(&mut self, target: usize, contributors: &[usize]) -> Result<()>;

    fn parameter_count(&self) -> usize;

    fn active_parameter_count(&self) -> usize;

    fn activation(&self) -> Activation;

    /// True when every contributor of `target`, bias included, is masked.
    fn is_dead(&self, target: usize) -> bool {
        (0..=self.contributors()).all(|i| !self.is_active(target, i))
    }
}

fn check_prune_indices(target: usize, targets: usize, idx: &[usize], limit: usize) -> Result<()> {
    if target >= targets {
        return Err(Error::Index(format!("target {target} of {targets}")));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i > limit) {
        return Err(Error::Index(format!(
            "contributor {bad} of {} (bias at {limit})",
            limit + 1
        )));
    }
    Ok(())
}

/// Fully connected layer, weights stored `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub weight_mask: Vec<bool>,
    pub bias_mask: Vec<bool>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[0] != bias.len() {
            return Err(Error::dim(format!(
                "dense weights {:?} with {} biases",
                weights.shape(),
                bias.len()
            )));
        }
        Ok(Self {
            weight_mask: vec![true; weights.len()],
            bias_mask: vec![true; bias.len()],
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self::new(Tensor::zeros(vec![outputs, inputs]), vec![T::zero(); outputs], activation)
            .expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn weight(&self, target: usize, input: usize) -> T {
        self.weights.data()[target * self.inputs() + input]
    }

    /// Pre-activations `x W^T + b` for a `N x inputs` batch.
    pub fn preactivation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.inputs() {
            return Err(Error::dim(format!(
                "dense layer with {} inputs fed {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        let (n, d, m) = (x.outer(), self.inputs(), self.outputs());
        let xt = transpose(x.data(), n, d);
        let mut zt = vec![T::zero(); m * n];
        gemm_acc(self.weights.data(), &xt, &mut zt, m, d, n);
        for (row, &b) in zt.chunks_exact_mut(n.max(1)).zip(&self.bias) {
            for v in row {
                *v += b;
            }
        }
        Tensor::new(vec![n, m], transpose(&zt, m, n))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let act = self.activation;
        Ok(self.preactivation(x)?.map(|v| act.apply(v)))
    }

    /// Zeroes every masked parameter.
    pub fn enforce_masks(&mut self) {
        for (w, &m) in self.weights.data_mut().iter_mut().zip(&self.weight_mask) {
            if !m {
                *w = T::zero();
            }
        }
        for (b, &m) in self.bias.iter_mut().zip(&self.bias_mask) {
            if !m {
                *b = T::zero();
            }
        }
    }
}

impl<T: Scalar> Prunable for DenseLayer<T> {
    fn targets(&self) -> usize {
        self.outputs()
    }

    fn contributors(&self) -> usize {
        self.inputs()
    }

    fn is_active(&self, target: usize, contributor: usize) -> bool {
        if contributor == self.inputs() {
            self.bias_mask[target]
        } else {
            self.weight_mask[target * self.inputs() + contributor]
        }
    }

    fn prune(&mut self, target: usize, contributors: &[usize]) -> Result<()> {
        let d = self.inputs();
        check_prune_indices(target, self.outputs(), contributors, d)?;
        for &i in contributors {
            if i == d {
                self.bias_mask[target] = false;
                self.bias[target] = T::zero();
            } else {
                self.weight_mask[target * d + i] = false;
                self.weights.data_mut()[target * d + i] = T::zero();
            }
        }
        Ok(())
    }

    fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn active_parameter_count(&self) -> usize {
        self.weight_mask.iter().chain(&self.bias_mask).filter(|&&m| m).count()
    }

    fn activation(&self) -> Activation {
        self.activation
    }
}

/// 2-D convolution, kernels stored `out x in x r x r`, masked per whole kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    /// `out x in`, one bit per kernel.
    pub kernel_mask: Vec<bool>,
    pub bias_mask: Vec<bool>,
    pub geometry: ConvGeometry,
    pub activation: Activation,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(
        kernels: Tensor<T>,
        bias: Vec<T>,
        geometry: ConvGeometry,
        activation: Activation,
    ) -> Result<Self> {
        let s = kernels.shape();
        if kernels.rank() != 4 || s[2] != s[3] || s[2] == 0 || s[0] != bias.len() {
            return Err(Error::dim(format!("conv kernels {s:?} with {} biases", bias.len())));
        }
        if geometry.stride.0 == 0 || geometry.stride.1 == 0 {
            return Err(Error::dim("conv stride must be positive"));
        }
        Ok(Self {
            kernel_mask: vec![true; s[0] * s[1]],
            bias_mask: vec![true; bias.len()],
            kernels,
            bias,
            geometry,
            activation,
        })
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: ConvGeometry,
        activation: Activation,
    ) -> Self {
        Self::new(
            Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]),
            vec![T::zero(); out_channels],
            geometry,
            activation,
        )
        .expect("consistent shapes")
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// The `r x r` kernel connecting input channel `input` to filter `target`.
    pub fn kernel(&self, target: usize, input: usize) -> &[T] {
        let rr = self.kernel_size() * self.kernel_size();
        let start = (target * self.in_channels() + input) * rr;
        &self.kernels.data()[start..start + rr]
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || input[0] != self.in_channels() {
            return Err(Error::dim(format!(
                "conv layer with {} input channels fed {input:?}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self.geometry.output_hw(input[1], input[2], self.kernel_size())?;
        Ok(vec![self.out_channels(), oh, ow])
    }

    /// Pre-activation maps for a `N x C x H x W` batch.
    pub fn preactivation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!("conv layer fed {:?}", x.shape())));
        }
        let out_shape = self.output_shape(&x.shape()[1..])?;
        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
        let r = self.kernel_size();
        let plane = oh * ow;
        let n = x.outer();
        let mut cols = vec![T::zero(); c * r * r * plane];
        let mut out = Tensor::zeros(vec![n, o, oh, ow]);
        for s in 0..n {
            im2col(x.sample(s), (c, h, w), r, self.geometry, (oh, ow), &mut cols);
            let dst = out.sample_mut(s);
            gemm_acc(self.kernels.data(), &cols, dst, o, c * r * r, plane);
            for (map, &b) in dst.chunks_exact_mut(plane).zip(&self.bias) {
                for v in map {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let act = self.activation;
        Ok(self.preactivation(x)?.map(|v| act.apply(v)))
    }

    pub fn enforce_masks(&mut self) {
        let rr = self.kernel_size() * self.kernel_size();
        for (kernel, &m) in self.kernels.data_mut().chunks_exact_mut(rr).zip(&self.kernel_mask) {
            if !m {
                kernel.fill(T::zero());
            }
        }
        for (b, &m) in self.bias.iter_mut().zip(&self.bias_mask) {
            if !m {
                *b = T::zero();
            }
        }
    }
}

impl<T: Scalar> Prunable for ConvLayer<T> {
    fn targets(&self) -> usize {
        self.out_channels()
    }

    fn contributors(&self) -> usize {
        self.in_channels()
    }

    fn is_active(&self, target: usize, contributor: usize) -> bool {
        if contributor == self.in_channels() {
            self.bias_mask[target]
        } else {
            self.kernel_mask[target * self.in_channels() + contributor]
        }
    }

    fn prune(&mut self, target: usize, contributors: &[usize]) -> Result<()> {
        let c = self.in_channels();
        check_prune_indices(target, self.out_channels(), contributors, c)?;
        let rr = self.kernel_size() * self.kernel_size();
        for &i in contributors {
            if i == c {
                self.bias_mask[target] = false;
                self.bias[target] = T::zero();
            } else {
                let k = target * c + i;
                self.kernel_mask[k] = false;
                self.kernels.data_mut()[k * rr..(k + 1) * rr].fill(T::zero());
            }
        }
        Ok(())
    }

    fn parameter_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    fn active_parameter_count(&self) -> usize {
        let rr = self.kernel_size() * self.kernel_size();
        self.kernel_mask.iter().filter(|&&m| m).count() * rr
            + self.bias_mask.iter().filter(|&&m| m).count()
    }

    fn activation(&self) -> Activation {
        self.activation
    }
}

/// Max pooling with a square window; no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 3 || self.window == 0 || self.stride == 0 {
            return Err(Error::dim(format!("max pool fed {input:?}")));
        }
        if input[1] < self.window || input[2] < self.window {
            return Err(Error::dim(format!("pool window {} exceeds {input:?}", self.window)));
        }
        Ok(vec![
            input[0],
            (input[1] - self.window) / self.stride + 1,
            (input[2] - self.window) / self.stride + 1,
        ])
    }

    /// Flat input offset of the maximum of each output cell (first max wins).
    pub fn argmax<T: Scalar>(&self, sample: &[T], shape: &[usize]) -> Vec<usize> {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let oh = (h - self.window) / self.stride + 1;
        let ow = (w - self.window) / self.stride + 1;
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + oy * self.stride) * w + ox * self.stride;
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let at = (ch * h + oy * self.stride + dy) * w + ox * self.stride + dx;
                            if sample[at] > sample[best] {
                                best = at;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
        idx
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::dim(format!("max pool fed {:?}", x.shape())));
        }
        let out_shape = self.output_shape(&x.shape()[1..])?;
        let mut shape = vec![x.outer()];
        shape.extend_from_slice(&out_shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in 0..x.outer() {
            let sample = x.sample(s);
            data.extend(self.argmax(sample, &x.shape()[1..]).into_iter().map(|i| sample[i]));
        }
        Tensor::new(shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Dense(DenseLayer<T>),
    Conv(ConvLayer<T>),
    MaxPool(MaxPool),
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::MaxPool(_) => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape of one sample, excluding the batch axis.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input.len() != 1 || input[0] != d.inputs() {
                    return Err(Error::dim(format!(
                        "dense layer with {} inputs fed {input:?}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv(c) => c.output_shape(input),
            Layer::MaxPool(p) => p.output_shape(input),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Post-activation output of a batch whose leading axis is the sample.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::MaxPool(p) => p.forward(x),
            Layer::Flatten => {
                let n = x.outer();
                let k = x.inner_len();
                x.clone().reshape(vec![n, k])
            }
        }
    }

    pub fn as_prunable(&self) -> Option<&dyn Prunable> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_prunable_mut(&mut self) -> Option<&mut dyn Prunable> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    /// Prunes the listed contributors of `target`.
    pub fn apply_mask(&mut self, target: usize, contributors: &[usize]) -> Result<()> {
        let kind = self.kind();
        self.as_prunable_mut()
            .ok_or_else(|| Error::Capability(format!("{kind} layers have no prunable parameters")))?
            .prune(target, contributors)
    }

    pub fn enforce_masks(&mut self) {
        match self {
            Layer::Dense(d) => d.enforce_masks(),
            Layer::Conv(c) => c.enforce_masks(),
            _ => {}
        }
    }

    /// Parameter and mask buffers, in serialization order.
    pub(crate) fn parameters_mut(&mut self) -> Vec<(&mut [T], &[bool], usize)> {
        match self {
            Layer::Dense(d) => vec![
                (d.weights.data_mut(), &d.weight_mask[..], 1),
                (&mut d.bias[..], &d.bias_mask[..], 1),
            ],
            Layer::Conv(c) => {
                let rr = c.kernel_size() * c.kernel_size();
                vec![
                    (c.kernels.data_mut(), &c.kernel_mask[..], rr),
                    (&mut c.bias[..], &c.bias_mask[..], 1),
                ]
            }
            _ => Vec::new(),
        }
    }
}

/// Per-layer post-activation outputs captured during a forward pass.
///
/// `outputs[0]` is the input batch; `outputs[l + 1]` is the output of layer
/// `l`, so the scoring input of layer `l` is `outputs[l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace<T> {
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    /// Input batch seen by layer `layer`.
    pub fn input_to(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer]
    }

    pub fn samples(&self) -> usize {
        self.outputs[0].outer()
    }
}

/// Sequential network ending in an identity dense layer that emits logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Self { input_shape, layers };
        net.validate_structure()?;
        Ok(net)
    }

    fn validate_structure(&self) -> Result<()> {
        match self.layers.last() {
            None => return Err(Error::dim("network needs at least one layer")),
            Some(Layer::Dense(d)) if d.activation == Activation::Identity => {}
            Some(_) => {
                return Err(Error::dim("last layer must be dense with identity activation"))
            }
        }
        self.layer_shapes().map(|_| ())
    }

    /// Output sample shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::dim(format!("layer {i} ({}): {e}", layer.kind())))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Input sample shape of layer `index`.
    pub fn input_shape_of(&self, index: usize) -> Result<Vec<usize>> {
        if index == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.layer_shapes()?.swap_remove(index - 1))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.outputs(),
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable layer access. Callers must keep shapes unchanged.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&Layer<T>> {
        self.layers.get(index)
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].as_prunable().is_some())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::as_prunable)
            .map(Prunable::parameter_count)
            .sum()
    }

    pub fn active_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::as_prunable)
            .map(Prunable::active_parameter_count)
            .sum()
    }

    /// Fraction `|w != 0| / |w|` counted from the masks.
    pub fn remaining_fraction(&self) -> f64 {
        self.active_parameter_count() as f64 / self.parameter_count() as f64
    }

    /// Clears every mask bit back to one without touching values.
    pub fn reset_masks(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    d.weight_mask.fill(true);
                    d.bias_mask.fill(true);
                }
                Layer::Conv(c) => {
                    c.kernel_mask.fill(true);
                    c.bias_mask.fill(true);
                }
                _ => {}
            }
        }
    }

    /// Copies the masks of `other`, which must share this architecture.
    pub fn copy_masks_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("mask source has a different layer count"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            match (dst, src) {
                (Layer::Dense(a), Layer::Dense(b)) if a.weights.shape() == b.weights.shape() => {
                    a.weight_mask.clone_from(&b.weight_mask);
                    a.bias_mask.clone_from(&b.bias_mask);
                }
                (Layer::Conv(a), Layer::Conv(b)) if a.kernels.shape() == b.kernels.shape() => {
                    a.kernel_mask.clone_from(&b.kernel_mask);
                    a.bias_mask.clone_from(&b.bias_mask);
                }
                (Layer::MaxPool(_), Layer::MaxPool(_)) | (Layer::Flatten, Layer::Flatten) => {}
                _ => return Err(Error::dim("mask source has a different architecture")),
            }
        }
        self.enforce_masks();
        Ok(())
    }

    pub fn enforce_masks(&mut self) {
        for layer in &mut self.layers {
            layer.enforce_masks();
        }
    }

    /// Checks shapes, mask sizes, and that masked parameters are exactly zero.
    pub fn check_invariants(&self) -> Result<()> {
        self.validate_structure()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: &str| Error::Format(format!("layer {i}: {what}"));
            match layer {
                Layer::Dense(d) => {
                    if d.weight_mask.len() != d.weights.len() || d.bias_mask.len() != d.bias.len() {
                        return Err(bad("mask shape differs from parameter shape"));
                    }
                    let w_ok = d.weights.data().iter().zip(&d.weight_mask).all(|(w, &m)| m || *w == T::zero());
                    let b_ok = d.bias.iter().zip(&d.bias_mask).all(|(b, &m)| m || *b == T::zero());
                    if !w_ok || !b_ok {
                        return Err(bad("masked parameter is nonzero"));
                    }
                }
                Layer::Conv(c) => {
                    let rr = c.kernel_size() * c.kernel_size();
                    if c.kernel_mask.len() * rr != c.kernels.len() || c.bias_mask.len() != c.bias.len() {
                        return Err(bad("mask shape differs from parameter shape"));
                    }
                    let k_ok = c
                        .kernels
                        .data()
                        .chunks_exact(rr)
                        .zip(&c.kernel_mask)
                        .all(|(k, &m)| m || k.iter().all(|v| *v == T::zero()));
                    let b_ok = c.bias.iter().zip(&c.bias_mask).all(|(b, &m)| m || *b == T::zero());
                    if !k_ok || !b_ok {
                        return Err(bad("masked parameter is nonzero"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() < 2 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "network expects samples shaped {:?}, got batch {:?}",
                self.input_shape,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass over a stacked batch (`N x input_shape`).
    ///
    /// Returns `N x classes` logits and, when `capture` is set, the
    /// post-activation output of every layer.
    pub fn forward_batch(
        &self,
        batch: &Tensor<T>,
        capture: bool,
    ) -> Result<(Tensor<T>, Option<ActivationTrace<T>>)> {
        self.check_batch(batch)?;
        if capture {
            let mut outputs = Vec::with_capacity(self.layers.len() + 1);
            outputs.push(batch.clone());
            for layer in &self.layers {
                let next = layer.forward(outputs.last().expect("nonempty"))?;
                outputs.push(next);
            }
            let logits = outputs.last().expect("nonempty").clone();
            return Ok((logits, Some(ActivationTrace { outputs })));
        }
        let n = batch.outer();
        let mut data = Vec::with_capacity(n * self.classes());
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut x = batch.gather(&idx);
            for layer in &self.layers {
                x = layer.forward(&x)?;
            }
            data.extend_from_slice(x.data());
        }
        Ok((Tensor::new(vec![n, self.classes()], data)?, None))
    }

    /// Forward pass over a list of samples, returning one logit vector each.
    pub fn forward(
        &self,
        batch: &[Tensor<T>],
        capture: bool,
    ) -> Result<(Vec<Vec<T>>, Option<ActivationTrace<T>>)> {
        let stacked = Tensor::stack(batch)?;
        let (logits, trace) = self.forward_batch(&stacked, capture)?;
        let rows = (0..logits.outer()).map(|i| logits.sample(i).to_vec()).collect();
        Ok((rows, trace))
    }

    /// Index of the largest logit per sample.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_batch(batch, false)?;
        Ok((0..logits.outer()).map(|i| argmax(logits.sample(i))).collect())
    }
}

/// Index of the first maximal element.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[Vec<f32>], bias: &[f32], act: Activation) -> DenseLayer<f32> {
        DenseLayer::new(Tensor::from_rows(rows).unwrap(), bias.to_vec(), act).unwrap()
    }

    #[test]
    fn identity_network_passes_inputs_through() {
        let layer = dense(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0], Activation::Identity);
        let net = Network::new(vec![2], vec![Layer::Dense(layer)]).unwrap();
        let x = vec![Tensor::new(vec![2], vec![3.0, -4.0]).unwrap()];
        let (logits, _) = net.forward(&x, false).unwrap();
        assert_eq!(logits, vec![vec![3.0, -4.0]]);
    }

    #[test]
    fn relu_dense_then_identity_head() {
        let hidden = dense(&[vec![2.0, -1.0]], &[0.5], Activation::Relu);
        let head = dense(&[vec![1.0]], &[0.0], Activation::Identity);
        let net = Network::new(vec![2], vec![Layer::Dense(hidden), Layer::Dense(head)]).unwrap();
        let x = vec![Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()];
        let (logits, trace) = net.forward(&x, true).unwrap();
        assert_eq!(logits, vec![vec![2.5]]);
        let trace = trace.unwrap();
        assert_eq!(trace.outputs.len(), 3);
        assert_eq!(trace.input_to(1).data(), &[2.5]);
    }

    #[test]
    fn fully_masked_network_emits_zero() {
        let mut a = dense(&[vec![2.0, -1.0], vec![0.3, 0.7]], &[0.0, 0.0], Activation::Tanh);
        let mut b = dense(&[vec![1.0, 4.0]], &[0.0], Activation::Identity);
        for j in 0..2 {
            a.prune(j, &[0, 1, 2]).unwrap();
        }
        b.prune(0, &[0, 1, 2]).unwrap();
        let net = Network::new(vec![2], vec![Layer::Dense(a), Layer::Dense(b)]).unwrap();
        let x = vec![Tensor::new(vec![2], vec![5.0, -3.0]).unwrap()];
        assert_eq!(net.forward(&x, false).unwrap().0, vec![vec![0.0]]);
        assert!(net.layers()[0].as_prunable().unwrap().is_dead(1));
    }

    #[test]
    fn prune_bias_only_changes_preactivation() {
        let mut layer = dense(&[vec![2.0, -1.0]], &[0.5], Activation::Identity);
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(layer.preactivation(&x).unwrap().data(), &[1.5]);
        layer.prune(0, &[2]).unwrap();
        assert_eq!(layer.preactivation(&x).unwrap().data(), &[1.0]);
        assert!(!layer.bias_mask[0]);
        assert!(layer.weight_mask.iter().all(|&m| m));
    }

    #[test]
    fn prune_nothing_is_identity_and_bad_index_errors() {
        let mut layer = dense(&[vec![2.0, -1.0]], &[0.5], Activation::Relu);
        let before = layer.clone();
        layer.prune(0, &[]).unwrap();
        assert_eq!(layer, before);
        assert!(matches!(layer.prune(0, &[3]), Err(Error::Index(_))));
        assert!(matches!(layer.prune(1, &[0]), Err(Error::Index(_))));
    }

    #[test]
    fn conv_filter_with_everything_masked_is_zero() {
        let kernels = Tensor::from_fn(vec![2, 3, 2, 2], |i| (i as f32 * 0.37).sin());
        let mut conv = ConvLayer::new(kernels, vec![0.2, -0.4], ConvGeometry::default(), Activation::Elu).unwrap();
        conv.prune(1, &[0, 1, 2, 3]).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 4, 4], |i| (i as f32 * 0.11).cos());
        let y = conv.forward(&x).unwrap();
        for s in 0..2 {
            let maps = y.sample(s);
            assert!(maps[9..].iter().all(|&v| v == 0.0));
            assert!(maps[..9].iter().any(|&v| v != 0.0));
        }
        assert_eq!(conv.active_parameter_count(), 3 * 4 + 1);
    }

    #[test]
    fn capture_does_not_change_logits() {
        let conv = ConvLayer::new(
            Tensor::from_fn(vec![3, 1, 3, 3], |i| ((i * 7 % 5) as f32 - 2.0) * 0.3),
            vec![0.1, 0.0, -0.1],
            ConvGeometry::new((1, 1), (1, 1)),
            Activation::Relu,
        )
        .unwrap();
        let head = DenseLayer::new(
            Tensor::from_fn(vec![4, 3 * 3 * 3], |i| ((i * 11 % 13) as f32 - 6.0) * 0.05),
            vec![0.0; 4],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(
            vec![1, 6, 6],
            vec![Layer::Conv(conv), Layer::MaxPool(MaxPool::new(2, 2)), Layer::Flatten, Layer::Dense(head)],
        )
        .unwrap();
        let batch = Tensor::from_fn(vec![300, 1, 6, 6], |i| ((i * 31 % 17) as f32) / 17.0);
        let (a, trace) = net.forward_batch(&batch, true).unwrap();
        let (b, none) = net.forward_batch(&batch, false).unwrap();
        assert!(none.is_none());
        assert_eq!(trace.unwrap().outputs.len(), 5);
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn structure_validation() {
        let relu_head = dense(&[vec![1.0]], &[0.0], Activation::Relu);
        assert!(Network::new(vec![1], vec![Layer::Dense(relu_head)]).is_err());
        assert!(Network::<f32>::new(vec![1], vec![]).is_err());
        let head = dense(&[vec![1.0, 1.0]], &[0.0], Activation::Identity);
        assert!(Network::new(vec![3], vec![Layer::Dense(head)]).is_err());
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0f32, 3.0, 3.0, 0.0, 2.0, 3.0, -1.0, 5.0]).unwrap();
        let y = MaxPool::new(2, 2).forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(MaxPool::new(2, 2).argmax(x.sample(0), &[1, 2, 4]), vec![1, 7]);
    }

    #[test]
    fn lipschitz_constants() {
        assert_eq!(Activation::Relu.lipschitz(), 1.0);
        assert_eq!(Activation::Elu.lipschitz(), 1.0);
        assert_eq!(Activation::Tanh.lipschitz(), 1.0);
        assert_eq!(Activation::Sigmoid.lipschitz(), 0.25);
        assert_eq!(Activation::Identity.lipschitz(), 1.0);
        assert_eq!("elu".parse::<Activation>().unwrap(), Activation::Elu);
        assert!("gelu".parse::<Activation>().is_err());
    }
}
