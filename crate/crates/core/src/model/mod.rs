//! Fixed feed-forward classifiers: validation, forward passes with activation
//! capture, and gradients of a class logit with respect to a layer's output.
//!
//! Weights are stored as `f32` tensors; all arithmetic runs in `f64`. The
//! activation captured at a named layer is rounded to `f32` before the upper
//! layers consume it, so a gradient computed from an image is bit-identical
//! to one computed from that image's stored activation.

mod format;
mod layers;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use format::{load_model, save_model, save_model_zip};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// Shape `[out_channels, kernel_h, kernel_w, in_channels]`.
    pub weight: Tensor,
    /// Shape `[out_channels]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// Shape `[out_features, in_features]`; row `k` feeds output `k`.
    pub weight: Tensor,
    /// Shape `[out_features]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Convolution(Conv2d),
    Relu,
    MaxPool(Pool),
    GlobalAveragePool,
    Flatten,
    Dense(Dense),
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Convolution(_) => "convolution",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::GlobalAveragePool => "global-average-pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense(_) => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }
}

/// Per-channel input normalization applied inside [`ModelGraph::forward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_logits(instance_id: impl Into<String>, logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probabilities: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let predicted_class = argmax(&logits);
        let confidence = probabilities[predicted_class];
        Prediction {
            instance_id: instance_id.into(),
            logits,
            probabilities,
            predicted_class,
            confidence,
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A validated layered classifier. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    input_shape: [usize; 3],
    normalization: Normalization,
    class_names: Vec<String>,
    /// Output shape of each layer.
    shapes: Vec<Vec<usize>>,
    /// `f64` copies of (weight, bias) for weighted layers.
    params: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.normalization == other.normalization
            && self.class_names == other.class_names
    }
}

impl ModelGraph {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: [usize; 3],
        normalization: Normalization,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("model", "no layers"));
        }
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::validation("model", format!("input shape {input_shape:?} has a zero dimension")));
        }
        let channels = input_shape[2];
        if normalization.mean.len() != channels || normalization.std.len() != channels {
            return Err(Error::validation(
                "normalization",
                format!("expected {channels} channel means and stds"),
            ));
        }
        if normalization.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("normalization", "standard deviations must be positive"));
        }
        let mut seen = HashSet::new();
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::validation(&layer.name, "duplicate layer name"));
            }
        }

        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layers::output_shape(layer, &shape)?;
            shapes.push(shape.clone());
        }

        let last = layers.last().expect("non-empty");
        match &last.kind {
            LayerKind::Dense(d) if d.out_features == class_names.len() => {}
            LayerKind::Dense(d) => {
                return Err(Error::validation(
                    &last.name,
                    format!(
                        "terminal dense layer has {} outputs but there are {} classes",
                        d.out_features,
                        class_names.len()
                    ),
                ))
            }
            _ => {
                return Err(Error::validation(&last.name, "terminal layer must be dense"));
            }
        }

        let params = layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Convolution(c) => Some((c.weight.to_f64(), c.bias.to_f64())),
                LayerKind::Dense(d) => Some((d.weight.to_f64(), d.bias.to_f64())),
                _ => None,
            })
            .collect();

        Ok(ModelGraph { layers, input_shape, normalization, class_names, shapes, params })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_output_shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.shapes[self.layer_index(name)?])
    }

    fn input_shape_of(&self, index: usize) -> &[usize] {
        if index == 0 {
            &self.input_shape
        } else {
            &self.shapes[index - 1]
        }
    }

    fn normalize(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        let c = self.input_shape[2];
        Ok(image
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                (v as f64 - self.normalization.mean[ch] as f64) / self.normalization.std[ch] as f64
            })
            .collect())
    }

    /// Runs layers `range` starting from `input`.
    fn run(&self, range: std::ops::Range<usize>, mut input: Vec<f64>) -> Vec<f64> {
        for i in range {
            input = layers::forward(&self.layers[i], self.params[i].as_ref(), self.input_shape_of(i), &input).0;
        }
        input
    }

    fn check_class(&self, class_k: usize) -> Result<()> {
        if class_k >= self.num_classes() {
            return Err(Error::Parameter(format!(
                "class index {class_k} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn check_capture(&self, layer: &str) -> Result<usize> {
        let idx = self.layer_index(layer)?;
        if idx + 1 == self.layers.len() {
            return Err(Error::UnsupportedLayer(
                layer.to_string(),
                "the terminal layer has no layers above it".into(),
            ));
        }
        Ok(idx)
    }

    fn activation_f64(&self, image: &Tensor, layer_idx: usize) -> Result<Vec<f64>> {
        let x = self.normalize(image)?;
        Ok(round_to_storage(self.run(0..layer_idx + 1, x)))
    }

    /// Forward pass returning the prediction and the activation at `capture_layer`.
    pub fn forward(&self, image: &Tensor, capture_layer: &str) -> Result<(Prediction, Tensor)> {
        let idx = self.layer_index(capture_layer)?;
        let x = self.normalize(image)?;
        let act = self.run(0..idx + 1, x);
        let activation = Tensor::from_f64(self.shapes[idx].clone(), &act)?;
        let logits = self.run(idx + 1..self.layers.len(), act);
        Ok((Prediction::from_logits("", logits), activation))
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let x = self.normalize(image)?;
        Ok(Prediction::from_logits("", self.run(0..self.layers.len(), x)))
    }

    /// Activation at `layer` only, without running the layers above it.
    pub fn activation(&self, image: &Tensor, layer: &str) -> Result<Tensor> {
        let idx = self.layer_index(layer)?;
        let act = self.activation_f64(image, idx)?;
        Tensor::from_f64(self.shapes[idx].clone(), &act)
    }

    /// Logits obtained by feeding `activation` into the layers above `layer`.
    pub fn logits_from_activation(&self, layer: &str, activation: &Tensor) -> Result<Vec<f64>> {
        let idx = self.layer_index(layer)?;
        self.check_activation(idx, activation)?;
        Ok(self.run(idx + 1..self.layers.len(), activation.to_f64()))
    }

    fn check_activation(&self, idx: usize, activation: &Tensor) -> Result<()> {
        if activation.shape() != self.shapes[idx].as_slice() {
            return Err(Error::Shape(format!(
                "activation shape {:?} does not match layer `{}` output {:?}",
                activation.shape(),
                self.layers[idx].name,
                self.shapes[idx]
            )));
        }
        Ok(())
    }

    /// d logit_k / d a, where `a` is the output of `layer` for `image`.
    pub fn gradient_at_layer(&self, image: &Tensor, layer: &str, class_k: usize) -> Result<Tensor> {
        let idx = self.check_capture(layer)?;
        self.check_class(class_k)?;
        let act = self.activation_f64(image, idx)?;
        let grad = self.backprop_from(idx, act, class_k);
        Tensor::from_f64(self.shapes[idx].clone(), &grad)
    }

    /// Same as [`gradient_at_layer`](Self::gradient_at_layer) but starting from a
    /// stored activation; layers at or below `layer` are not consulted.
    pub fn gradient_from_activation(&self, layer: &str, activation: &Tensor, class_k: usize) -> Result<Tensor> {
        let idx = self.check_capture(layer)?;
        self.check_class(class_k)?;
        self.check_activation(idx, activation)?;
        let grad = self.backprop_from(idx, activation.to_f64(), class_k);
        Tensor::from_f64(self.shapes[idx].clone(), &grad)
    }

    /// Gradient in `f64`, used where downstream code takes inner products.
    pub(crate) fn gradient_f64(&self, image: &Tensor, layer_idx: usize, class_k: usize) -> Result<Vec<f64>> {
        self.check_class(class_k)?;
        let act = self.activation_f64(image, layer_idx)?;
        Ok(self.backprop_from(layer_idx, act, class_k))
    }

    pub(crate) fn capture_index(&self, layer: &str) -> Result<usize> {
        self.check_capture(layer)
    }

    fn backprop_from(&self, idx: usize, activation: Vec<f64>, class_k: usize) -> Vec<f64> {
        let upper = idx + 1..self.layers.len();
        let mut inputs = Vec::with_capacity(upper.len());
        let mut caches = Vec::with_capacity(upper.len());
        let mut x = activation;
        for i in upper.clone() {
            let (out, cache) = layers::forward(&self.layers[i], self.params[i].as_ref(), self.input_shape_of(i), &x);
            inputs.push(x);
            caches.push(cache);
            x = out;
        }
        let mut grad = vec![0.0; x.len()];
        grad[class_k] = 1.0;
        for (j, i) in upper.enumerate().rev() {
            grad = layers::backward(
                &self.layers[i],
                self.params[i].as_ref(),
                self.input_shape_of(i),
                &inputs[j],
                &caches[j],
                &grad,
            );
        }
        grad
    }
}

fn round_to_storage(values: Vec<f64>) -> Vec<f64> {
    values.into_iter().map(|v| v as f32 as f64).collect()
}
