//! Model interchange format: `model.json` (layer manifest) plus `tensors.bin`
//! (concatenated little-endian tensor entries), either as a directory or as a
//! zip archive holding both files.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conv2d, Dense, LayerKind, LayerSpec, ModelGraph, Normalization, Pool};
use crate::error::{Error, Result};
use crate::tensor::{decode_tensors, encode_tensor, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "model.json";
const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    input_shape: [usize; 3],
    normalization: Normalization,
    class_names: Vec<String>,
    layers: Vec<LayerManifest>,
}

/// Weighted layers reference tensor entries by their index in `tensors.bin`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LayerManifest {
    Convolution {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel_size: [usize; 2],
        stride: usize,
        padding: usize,
        weight: usize,
        bias: usize,
    },
    Relu {
        name: String,
    },
    Maxpool {
        name: String,
        window: usize,
        stride: usize,
    },
    GlobalAveragePool {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        weight: usize,
        bias: usize,
    },
}

/// Loads a model from a directory containing `model.json` and `tensors.bin`,
/// or from a zip archive of the two.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let (manifest, tensors) = if path.is_dir() {
        let m = fs::read(path.join(MANIFEST_FILE)).map_err(|e| Error::io(path.join(MANIFEST_FILE), e))?;
        let t = fs::read(path.join(TENSORS_FILE)).map_err(|e| Error::io(path.join(TENSORS_FILE), e))?;
        (m, t)
    } else {
        read_zip(path)?
    };
    parse_model(&manifest, &tensors)
}

fn read_zip(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| Error::Format {
        offset: 0,
        message: format!("not a model directory or zip archive: {e}"),
    })?;
    let mut manifest = None;
    let mut tensors = None;
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i).map_err(|e| Error::Format { offset: 0, message: e.to_string() })?;
        let name = entry.name().rsplit('/').next().unwrap_or_default().to_string();
        let slot = match name.as_str() {
            MANIFEST_FILE => &mut manifest,
            TENSORS_FILE => &mut tensors,
            _ => continue,
        };
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        *slot = Some(buf);
    }
    match (manifest, tensors) {
        (Some(m), Some(t)) => Ok((m, t)),
        _ => Err(Error::Format {
            offset: 0,
            message: format!("archive must contain {MANIFEST_FILE} and {TENSORS_FILE}"),
        }),
    }
}

fn json_offset(text: &[u8], err: &serde_json::Error) -> u64 {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split(|&b| b == b'\n')
        .take(line - 1)
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}

fn parse_model(manifest_bytes: &[u8], tensor_bytes: &[u8]) -> Result<ModelGraph> {
    let manifest: ModelManifest = serde_json::from_slice(manifest_bytes).map_err(|e| Error::Format {
        offset: json_offset(manifest_bytes, &e),
        message: format!("{MANIFEST_FILE}: {e}"),
    })?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::validation(
            "model",
            format!("unsupported model format version {}", manifest.format_version),
        ));
    }
    let tensors = decode_tensors(tensor_bytes)?;
    let fetch = |layer: &str, idx: usize| -> Result<Tensor> {
        tensors
            .get(idx)
            .cloned()
            .ok_or_else(|| Error::validation(layer, format!("references missing tensor entry {idx}")))
    };
    let layers = manifest
        .layers
        .into_iter()
        .map(|l| {
            Ok(match l {
                LayerManifest::Convolution { name, in_channels, out_channels, kernel_size, stride, padding, weight, bias } => {
                    let kind = LayerKind::Convolution(Conv2d {
                        in_channels,
                        out_channels,
                        kernel_size: (kernel_size[0], kernel_size[1]),
                        stride,
                        padding,
                        weight: fetch(&name, weight)?,
                        bias: fetch(&name, bias)?,
                    });
                    LayerSpec { name, kind }
                }
                LayerManifest::Relu { name } => LayerSpec { name, kind: LayerKind::Relu },
                LayerManifest::Maxpool { name, window, stride } => {
                    LayerSpec { name, kind: LayerKind::MaxPool(Pool { window, stride }) }
                }
                LayerManifest::GlobalAveragePool { name } => LayerSpec { name, kind: LayerKind::GlobalAveragePool },
                LayerManifest::Flatten { name } => LayerSpec { name, kind: LayerKind::Flatten },
                LayerManifest::Dense { name, in_features, out_features, weight, bias } => {
                    let kind = LayerKind::Dense(Dense {
                        in_features,
                        out_features,
                        weight: fetch(&name, weight)?,
                        bias: fetch(&name, bias)?,
                    });
                    LayerSpec { name, kind }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(layers, manifest.input_shape, manifest.normalization, manifest.class_names)
}

fn serialize_model(model: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut next = 0usize;
    let mut push = |t: &Tensor| {
        encode_tensor(&mut blob, t);
        next += 1;
        next - 1
    };
    let layers = model
        .layers()
        .iter()
        .map(|l| {
            let name = l.name.clone();
            match &l.kind {
                LayerKind::Convolution(c) => LayerManifest::Convolution {
                    name,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel_size: [c.kernel_size.0, c.kernel_size.1],
                    stride: c.stride,
                    padding: c.padding,
                    weight: push(&c.weight),
                    bias: push(&c.bias),
                },
                LayerKind::Relu => LayerManifest::Relu { name },
                LayerKind::MaxPool(p) => LayerManifest::Maxpool { name, window: p.window, stride: p.stride },
                LayerKind::GlobalAveragePool => LayerManifest::GlobalAveragePool { name },
                LayerKind::Flatten => LayerManifest::Flatten { name },
                LayerKind::Dense(d) => LayerManifest::Dense {
                    name,
                    in_features: d.in_features,
                    out_features: d.out_features,
                    weight: push(&d.weight),
                    bias: push(&d.bias),
                },
            }
        })
        .collect();
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        input_shape: model.input_shape(),
        normalization: model.normalization().clone(),
        class_names: model.class_names().to_vec(),
        layers,
    };
    Ok((serde_json::to_vec_pretty(&manifest)?, blob))
}

/// Writes `model.json` and `tensors.bin` into `dir`, creating it if needed.
pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = serialize_model(model)?;
    fs::write(dir.join(MANIFEST_FILE), manifest).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    fs::write(dir.join(TENSORS_FILE), blob).map_err(|e| Error::io(dir.join(TENSORS_FILE), e))?;
    Ok(())
}

/// Writes the model as a single zip archive.
pub fn save_model_zip(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (manifest, blob) = serialize_model(model)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default();
    let zerr = |e: zip::result::ZipError| Error::io(path, std::io::Error::other(e));
    zip.start_file(MANIFEST_FILE, opts).map_err(zerr)?;
    zip.write_all(&manifest).map_err(|e| Error::io(path, e))?;
    zip.start_file(TENSORS_FILE, opts).map_err(zerr)?;
    zip.write_all(&blob).map_err(|e| Error::io(path, e))?;
    zip.finish().map_err(zerr)?;
    Ok(())
}
