//! Randomly initialized small models for gradient and determinism checks.

use rand::Rng as _;

use crate::model::{Conv2d, Dense, LayerKind, LayerSpec, ModelGraph, Normalization, Pool};
use crate::rng::rng;
use crate::tensor::Tensor;

fn uniform_tensor(r: &mut crate::rng::Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (r.random_range(-1.0..1.0) * scale) as f32).collect();
    Tensor::new(shape, data).expect("finite weights")
}

pub fn conv(r: &mut crate::rng::Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> LayerSpec {
    let scale = (3.0 / (k * k * cin) as f64).sqrt();
    LayerSpec::new(
        name,
        LayerKind::Convolution(Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_size: (k, k),
            stride,
            padding,
            weight: uniform_tensor(r, vec![cout, k, k, cin], scale),
            bias: uniform_tensor(r, vec![cout], 0.1),
        }),
    )
}

pub fn dense(r: &mut crate::rng::Rng, name: &str, n_in: usize, n_out: usize) -> LayerSpec {
    let scale = (3.0 / n_in as f64).sqrt();
    LayerSpec::new(
        name,
        LayerKind::Dense(Dense {
            in_features: n_in,
            out_features: n_out,
            weight: uniform_tensor(r, vec![n_out, n_in], scale),
            bias: uniform_tensor(r, vec![n_out], 0.1),
        }),
    )
}

/// A random 8x8x3 convolutional classifier drawn from a few small templates,
/// with every supported layer kind represented across templates.
pub fn random_model(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let n_classes = r.random_range(2..=4);
    let c1 = r.random_range(2..=4);
    let template = r.random_range(0..3);
    let layers = match template {
        0 => {
            let c2 = r.random_range(2..=4);
            vec![
                conv(&mut r, "conv1", 3, c1, 3, 1, 1),
                LayerSpec::new("relu1", LayerKind::Relu),
                LayerSpec::new("pool1", LayerKind::MaxPool(Pool { window: 2, stride: 2 })),
                conv(&mut r, "conv2", c1, c2, 3, 1, 0),
                LayerSpec::new("relu2", LayerKind::Relu),
                LayerSpec::new("flat", LayerKind::Flatten),
                dense(&mut r, "fc1", 2 * 2 * c2, 6),
                LayerSpec::new("relu3", LayerKind::Relu),
                dense(&mut r, "logits", 6, n_classes),
            ]
        }
        1 => vec![
            conv(&mut r, "conv1", 3, c1, 3, 2, 1),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("gap", LayerKind::GlobalAveragePool),
            dense(&mut r, "fc1", c1, 5),
            LayerSpec::new("relu2", LayerKind::Relu),
            dense(&mut r, "logits", 5, n_classes),
        ],
        _ => vec![
            conv(&mut r, "conv1", 3, c1, 3, 1, 1),
            LayerSpec::new("relu1", LayerKind::Relu),
            conv(&mut r, "conv2", c1, c1, 3, 1, 1),
            LayerSpec::new("relu2", LayerKind::Relu),
            LayerSpec::new("pool", LayerKind::MaxPool(Pool { window: 4, stride: 4 })),
            LayerSpec::new("flat", LayerKind::Flatten),
            dense(&mut r, "logits", 2 * 2 * c1, n_classes),
        ],
    };
    let class_names = (0..n_classes).map(|i| format!("class{i}")).collect();
    ModelGraph::new(layers, [8, 8, 3], Normalization { mean: vec![0.5; 3], std: vec![0.25; 3] }, class_names)
        .expect("templates are shape-consistent")
}

/// Uniform random image in [0, 1].
pub fn random_image(seed: u64, shape: [usize; 3]) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(0.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite")
}
