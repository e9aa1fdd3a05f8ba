//! Desk-scale dataset with planted motifs and a hand-wired classifier whose
//! detectors respond to them.
//!
//! Images are 32x32 RGB: a disk of class texture (diagonal stripes, gray dots
//! on orange, flat magenta) over one of two backgrounds ("snow", "grass").
//! Snow dominates the striped and spotted classes and also raises their
//! logits, so it acts as a confound shared by both.
//!
//! The model is conv1 (7 planted detectors) -> relu1 -> pool1 (global max)
//! -> flatten -> dense1 (per-detector rescaling) -> logits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{encode_png, save_manifest, DatasetManifest, InstanceMeta, Split};
use crate::error::{Error, Result};
use crate::model::{save_model, Conv2d, Dense, LayerKind, LayerSpec, ModelGraph, Normalization, Pool};
use crate::rng::{derive_seed, rng};
use crate::segmentation::{extract_segments, Mask, Segment, SlicParams};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CLASS_NAMES: [&str; 3] = ["striped", "spotted", "plain"];
pub const PROBE_PER_CLASS: usize = 50;
pub const EVAL_PER_CLASS: usize = 30;
/// Layer whose activations the fixture pipeline probes: the global max of
/// every detector, so segment embeddings do not scale with segment area.
pub const PROBE_LAYER: &str = "pool1";
pub const DEFAULT_RESOLUTIONS: [usize; 3] = [15, 50, 80];
pub const MIN_SEGMENT_PIXELS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motif {
    Stripe,
    Dot,
    Flat,
    Snow,
    Grass,
}

impl Motif {
    pub const ALL: [Motif; 5] = [Motif::Stripe, Motif::Dot, Motif::Flat, Motif::Snow, Motif::Grass];

    pub fn name(self) -> &'static str {
        match self {
            Motif::Stripe => "stripe",
            Motif::Dot => "dot",
            Motif::Flat => "flat",
            Motif::Snow => "snow",
            Motif::Grass => "grass",
        }
    }

    /// Foreground motif of a class.
    pub fn of_class(class_k: usize) -> Motif {
        [Motif::Stripe, Motif::Dot, Motif::Flat][class_k]
    }
}

/// Contents of `oracle.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    /// Row-major motif per pixel, one raster per instance.
    pub pixel_motifs: BTreeMap<String, Vec<Motif>>,
    /// Majority motif of every segment produced with the default resolutions,
    /// for segments where one motif covers more than half of the mask.
    pub segment_motifs: BTreeMap<String, Motif>,
}

impl Oracle {
    /// Motif covering more than half of `mask`, if any.
    pub fn motif_of(&self, instance_id: &str, mask: &Mask) -> Option<Motif> {
        let raster = self.pixel_motifs.get(instance_id)?;
        majority(raster, mask)
    }
}

fn majority(raster: &[Motif], mask: &Mask) -> Option<Motif> {
    let mut counts = [0usize; 5];
    for (p, &inside) in mask.bits().iter().enumerate() {
        if inside {
            counts[Motif::ALL.iter().position(|m| *m == raster[p]).expect("known motif")] += 1;
        }
    }
    let total = mask.count();
    Motif::ALL.iter().zip(counts).find(|(_, c)| 2 * c > total).map(|(m, _)| *m)
}

pub struct PlantedFixture {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub model: ModelGraph,
    pub oracle: Oracle,
}

impl PlantedFixture {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("dataset.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join("model")
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.dir.join("oracle.json")
    }
}

const STRIPE_DARK: [f64; 3] = [0.15, 0.15, 0.15];
const STRIPE_LIGHT: [f64; 3] = [0.9, 0.9, 0.9];
const ORANGE: [f64; 3] = [0.95, 0.55, 0.1];
// Same luminance as ORANGE, so dots are invisible to the stripe detectors.
const DOT: [f64; 3] = [0.5333, 0.5333, 0.5333];
const MAGENTA: [f64; 3] = [0.75, 0.15, 0.55];
const SNOW: [f64; 3] = [0.78, 0.88, 1.0];
const GRASS: [f64; 3] = [0.25, 0.55, 0.2];

/// Probability that an image of each class sits on snow.
const SNOW_RATE: [f64; 3] = [0.8, 0.8, 0.2];

/// Renders one image and its motif raster.
pub fn render_image(class_k: usize, seed: u64) -> (Tensor, Vec<Motif>) {
    let mut r = rng(seed);
    let background = if r.random_bool(SNOW_RATE[class_k]) { Motif::Snow } else { Motif::Grass };
    let cy = r.random_range(10.0..22.0);
    let cx = r.random_range(10.0..22.0);
    let radius: f64 = r.random_range(8.0..11.0);
    let phase = r.random_range(0..4usize);
    let (oy, ox) = (r.random_range(0..5usize), r.random_range(0..5usize));
    let motif = Motif::of_class(class_k);

    let mut data = vec![0f32; SIDE * SIDE * 3];
    let mut raster = vec![background; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = y * SIDE + x;
            let inside = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= radius * radius;
            let rgb = if inside {
                raster[p] = motif;
                match motif {
                    Motif::Stripe => {
                        if (x + y + phase) % 4 < 2 { STRIPE_DARK } else { STRIPE_LIGHT }
                    }
                    Motif::Dot => {
                        let dy = (y + 5 - oy) % 5;
                        let dx = (x + 5 - ox) % 5;
                        let d = |v: usize| v.min(5 - v);
                        if d(dy) + d(dx) <= 1 { DOT } else { ORANGE }
                    }
                    _ => MAGENTA,
                }
            } else {
                let (base, amp) = if background == Motif::Snow { (SNOW, 0.04) } else { (GRASS, 0.06) };
                let n = r.random_range(-amp..amp);
                [base[0] + n, base[1] + n, base[2] + n]
            };
            for c in 0..3 {
                // Quantized as stored on disk.
                data[p * 3 + c] = ((rgb[c].clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
    }
    (Tensor::new(vec![SIDE, SIDE, 3], data).expect("finite pixels"), raster)
}

/// Detector channels of the first convolution, in order.
pub const CHANNELS: [&str; 7] = ["stripe_cos", "stripe_sin", "dot", "snow", "grass", "magenta", "orange"];
const KERNEL: usize = 5;
const NORM_MEAN: f32 = 0.5;
const NORM_STD: f32 = 0.25;

/// 5x5x3 -> 7 planted filters over the normalized input `z = (x - 0.5) / 0.25`.
fn planted_conv() -> Conv2d {
    let c_out = CHANNELS.len();
    let mut w = vec![0f32; c_out * KERNEL * KERNEL * 3];
    let mut b = vec![0f32; c_out];
    let idx = |o: usize, ky: usize, kx: usize, c: usize| ((o * KERNEL + ky) * KERNEL + kx) * 3 + c;
    let quarter = std::f64::consts::FRAC_PI_2;

    // Diagonal period-4 luminance gratings in quadrature, zero-mean.
    let mut cos = [[0f64; KERNEL]; KERNEL];
    let mut sin = [[0f64; KERNEL]; KERNEL];
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            let s = (ky + kx) as f64 - 4.0;
            cos[ky][kx] = (quarter * s).cos();
            sin[ky][kx] = (quarter * s).sin();
        }
    }
    let mean_cos = cos.iter().flatten().sum::<f64>() / (KERNEL * KERNEL) as f64;
    // Center-surround on red minus blue: a neutral plus-shaped dot inside an
    // orange ring.
    let mut dot = [[0f64; KERNEL]; KERNEL];
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            let d = ky.abs_diff(2) + kx.abs_diff(2);
            dot[ky][kx] = if d <= 1 { -1.0 } else { 0.25 };
        }
    }
    for ky in 0..KERNEL {
        for kx in 0..KERNEL {
            for c in 0..3 {
                w[idx(0, ky, kx, c)] = ((cos[ky][kx] - mean_cos) / 3.0) as f32;
                w[idx(1, ky, kx, c)] = (sin[ky][kx] / 3.0) as f32;
            }
            w[idx(2, ky, kx, 0)] = (dot[ky][kx] / 2.0) as f32;
            w[idx(2, ky, kx, 2)] = (-dot[ky][kx] / 2.0) as f32;
        }
    }

    // Per-pixel color detectors (center tap only): weights per (r, g, b) and a threshold.
    let colors: [(usize, [f64; 3], f64); 4] = [
        (3, [-1.0, 0.0, 1.0], -0.4),
        (4, [-0.5, 1.0, -0.5], -0.4),
        (5, [1.0, -2.0, 1.0], -1.0),
        (6, [1.0, 0.0, -1.0], -1.5),
    ];
    for (o, rgb, threshold) in colors {
        for c in 0..3 {
            w[idx(o, KERNEL / 2, KERNEL / 2, c)] = rgb[c] as f32;
        }
        b[o] = threshold as f32;
    }
    Conv2d {
        in_channels: 3,
        out_channels: c_out,
        kernel_size: (KERNEL, KERNEL),
        stride: 1,
        padding: KERNEL / 2,
        weight: Tensor::new(vec![c_out, KERNEL, KERNEL, 3], w).expect("finite"),
        bias: Tensor::new(vec![c_out], b).expect("finite"),
    }
}

/// Logit weights over the normalized detector responses.
fn head_weights() -> [[f64; 7]; 3] {
    //        cos   sin   dot   snow  grass  mag   orange
    [
        [3.0, 3.0, -2.0, 1.5, 0.0, -3.0, -3.0],
        [-1.5, -1.5, 3.0, 1.5, 0.0, -3.0, 3.0],
        [-1.5, -1.5, -2.0, 0.0, 1.5, 5.0, -3.0],
    ]
}

fn assemble(scales: &[f64]) -> Result<ModelGraph> {
    let c = CHANNELS.len();
    let mut dense1 = vec![0f32; c * c];
    for (i, s) in scales.iter().enumerate() {
        dense1[i * c + i] = *s as f32;
    }
    let head = head_weights();
    let logits: Vec<f32> = head.iter().flatten().map(|&v| v as f32).collect();
    let layers = vec![
        LayerSpec::new("conv1", LayerKind::Convolution(planted_conv())),
        LayerSpec::new("relu1", LayerKind::Relu),
        LayerSpec::new("pool1", LayerKind::MaxPool(Pool { window: SIDE, stride: SIDE })),
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new(
            "dense1",
            LayerKind::Dense(Dense {
                in_features: c,
                out_features: c,
                weight: Tensor::new(vec![c, c], dense1)?,
                bias: Tensor::zeros(vec![c]),
            }),
        ),
        LayerSpec::new(
            "logits",
            LayerKind::Dense(Dense {
                in_features: c,
                out_features: CLASS_NAMES.len(),
                weight: Tensor::new(vec![CLASS_NAMES.len(), c], logits)?,
                bias: Tensor::new(vec![CLASS_NAMES.len()], vec![-1.0, -1.0, -1.0])?,
            }),
        ),
    ];
    ModelGraph::new(
        layers,
        [SIDE, SIDE, 3],
        Normalization { mean: vec![NORM_MEAN; 3], std: vec![NORM_STD; 3] },
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// The planted classifier. `dense1` rescales each detector so that its mean
/// response on the images it targets is 1.
pub fn planted_model(calibration: &[(usize, Tensor, Motif)]) -> Result<ModelGraph> {
    let raw = assemble(&[1.0; 7])?;
    let mut sums = [0f64; 7];
    let mut counts = [0usize; 7];
    for (class_k, image, background) in calibration {
        let act = raw.activation(image, PROBE_LAYER)?;
        let target_channels: &[usize] = match class_k {
            0 => &[0, 1],
            1 => &[2, 6],
            _ => &[5],
        };
        for &ch in target_channels.iter().chain(if *background == Motif::Snow { &[3usize][..] } else { &[4usize][..] }) {
            sums[ch] += act.data()[ch] as f64;
            counts[ch] += 1;
        }
    }
    let scales: Vec<f64> = (0..7)
        .map(|ch| if counts[ch] == 0 || sums[ch] <= 0.0 { 1.0 } else { counts[ch] as f64 / sums[ch] })
        .collect();
    assemble(&scales)
}

/// Writes `dataset.json`, `images/`, `model/` and `oracle.json` under `dir`.
pub fn build_planted_fixture(dir: impl AsRef<Path>, seed: u64) -> Result<PlantedFixture> {
    let dir = dir.as_ref().to_path_buf();
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut instances = Vec::new();
    let mut rendered = Vec::new();
    let mut pixel_motifs = BTreeMap::new();
    for (split, per_class) in [(Split::Probe, PROBE_PER_CLASS), (Split::Eval, EVAL_PER_CLASS)] {
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            for i in 0..per_class {
                let split_name = if split == Split::Probe { "probe" } else { "eval" };
                let id = format!("{name}-{split_name}-{i:02}");
                let stream = format!("{split_name}-{k}");
                let (image, raster) = render_image(k, derive_seed(seed, &stream, i as u64));
                let rel = format!("images/{id}.png");
                let path = dir.join(&rel);
                fs::write(&path, encode_png(&image)?).map_err(|e| Error::io(&path, e))?;
                let background = if raster.contains(&Motif::Snow) { Motif::Snow } else { Motif::Grass };
                instances.push(InstanceMeta { instance_id: id.clone(), path: rel, label: k, split });
                if split == Split::Probe {
                    rendered.push((k, image, background));
                }
                pixel_motifs.insert(id, raster);
            }
        }
    }

    let manifest = DatasetManifest::new(
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        [SIDE, SIDE, 3],
        instances,
        &dir,
    )?;
    save_manifest(&manifest, dir.join("dataset.json"))?;

    let model = planted_model(&rendered)?;
    save_model(&model, dir.join("model"))?;

    let mut segment_motifs = BTreeMap::new();
    for inst in manifest.split(Split::Probe) {
        let image = manifest.load_image(inst)?;
        let raster = &pixel_motifs[&inst.instance_id];
        for seg in default_segments(&image, &inst.instance_id)? {
            if let Some(m) = majority(raster, &seg.mask) {
                segment_motifs.insert(seg.segment_id, m);
            }
        }
    }
    let oracle = Oracle { pixel_motifs, segment_motifs };
    let oracle_path = dir.join("oracle.json");
    fs::write(&oracle_path, serde_json::to_vec(&oracle)?).map_err(|e| Error::io(&oracle_path, e))?;

    Ok(PlantedFixture { dir, manifest, model, oracle })
}

/// Segments produced by the default pipeline settings.
pub fn default_segments(image: &Tensor, instance_id: &str) -> Result<Vec<Segment>> {
    extract_segments(image, instance_id, &DEFAULT_RESOLUTIONS, &SlicParams::new(0), MIN_SEGMENT_PIXELS)
}

pub fn load_oracle(path: impl AsRef<Path>) -> Result<Oracle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests;
