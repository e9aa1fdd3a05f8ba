//! Dataset manifests, class sampling and PNG image loading.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Probe,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    #[serde(rename = "id")]
    pub instance_id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

/// Contents of `dataset.json`. Pixels are loaded on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub instances: Vec<InstanceMeta>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, image_shape: [usize; 3], instances: Vec<InstanceMeta>, root: impl Into<PathBuf>) -> Result<Self> {
        let manifest = DatasetManifest { class_names, image_shape, instances, root: root.into() };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.image_shape.iter().any(|&d| d == 0) || !matches!(self.image_shape[2], 1 | 3) {
            return Err(Error::validation("dataset", format!("unsupported image shape {:?}", self.image_shape)));
        }
        let mut seen = std::collections::HashSet::new();
        for inst in &self.instances {
            if inst.label >= self.class_names.len() {
                return Err(Error::validation(
                    format!("instance {}", inst.instance_id),
                    format!("label {} out of range for {} classes", inst.label, self.class_names.len()),
                ));
            }
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(Error::validation(format!("instance {}", inst.instance_id), "duplicate instance id"));
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn instance(&self, id: &str) -> Option<&InstanceMeta> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &InstanceMeta> {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn image_path(&self, instance: &InstanceMeta) -> PathBuf {
        self.root.join(&instance.path)
    }

    /// Loads an instance's PNG as an `(height, width, channels)` tensor in [0, 1].
    /// Grayscale files in an RGB dataset are channel-replicated.
    pub fn load_image(&self, instance: &InstanceMeta) -> Result<Tensor> {
        let path = self.image_path(instance);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_png(&bytes, self.image_shape).map_err(|e| match e {
            Error::Image { message, .. } => Error::Image { path: path.clone(), message },
            other => other,
        })
    }

    /// Per-channel mean pixel value over the probe split.
    pub fn channel_means(&self) -> Result<Vec<f64>> {
        let c = self.image_shape[2];
        let mut sums = vec![0.0f64; c];
        let mut count = 0usize;
        for inst in self.split(Split::Probe) {
            let img = self.load_image(inst)?;
            for (i, &v) in img.data().iter().enumerate() {
                sums[i % c] += v as f64;
            }
            count += img.len() / c;
        }
        if count == 0 {
            return Ok(vec![0.5; c]);
        }
        Ok(sums.into_iter().map(|s| s / count as f64).collect())
    }

    /// Draws `min(n, available)` probe instances of `class_k` without replacement.
    /// The result is ordered as in the manifest.
    pub fn sample_class_images(&self, class_k: usize, n: usize, seed: u64) -> Result<Vec<InstanceMeta>> {
        let pool: Vec<&InstanceMeta> = self
            .split(Split::Probe)
            .filter(|i| i.label == class_k)
            .collect();
        if pool.is_empty() {
            return Err(Error::EmptyClass(class_k));
        }
        let take = n.min(pool.len());
        let mut picked = index::sample(&mut rng(seed), pool.len(), take).into_vec();
        picked.sort_unstable();
        Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
    }
}

/// Reads and validates `dataset.json`. Instance paths resolve relative to its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join("dataset.json") } else { path.to_path_buf() };
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_vec_pretty(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn decode_png(bytes: &[u8], shape: [usize; 3]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if [h, w] != [shape[0], shape[1]] {
        return Err(Error::Shape(format!("image is {h}x{w}, dataset expects {}x{}", shape[0], shape[1])));
    }
    let raw: Vec<u8> = match shape[2] {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Encodes an `(h, w, 1|3)` tensor with values in [0, 1] as an 8-bit PNG.
pub fn encode_png(tensor: &Tensor) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() != 3 || !matches!(shape[2], 1 | 3) {
        return Err(Error::Shape(format!("cannot encode shape {shape:?} as PNG")));
    }
    let bytes: Vec<u8> = tensor
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let img = if shape[2] == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::new(),
        message: e.to_string(),
    })?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dataset(dir: &Path, per_class_probe: &[usize]) -> DatasetManifest {
        fs::create_dir_all(dir.join("images")).unwrap();
        let mut instances = Vec::new();
        for (k, &n) in per_class_probe.iter().enumerate() {
            for i in 0..n {
                let id = format!("k{k}_{i}");
                let value = (k as f32 + 1.0) / 4.0;
                let t = Tensor::new(vec![4, 4, 3], vec![value; 48]).unwrap();
                let rel = format!("images/{id}.png");
                fs::write(dir.join(&rel), encode_png(&t).unwrap()).unwrap();
                instances.push(InstanceMeta { instance_id: id, path: rel, label: k, split: Split::Probe });
            }
        }
        let m = DatasetManifest::new(
            (0..per_class_probe.len()).map(|k| format!("class{k}")).collect(),
            [4, 4, 3],
            instances,
            dir,
        )
        .unwrap();
        save_manifest(&m, dir.join("dataset.json")).unwrap();
        m
    }

    #[test]
    fn manifest_round_trip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[3, 2]);
        let m = load_manifest(dir.path().join("dataset.json")).unwrap();
        assert_eq!(m.instances.len(), 5);
        assert_eq!(m.num_classes(), 2);
        let text = fs::read_to_string(dir.path().join("dataset.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["class_names", "image_shape", "instances"]);
        let mut inst_keys: Vec<_> = v["instances"][0].as_object().unwrap().keys().cloned().collect();
        inst_keys.sort();
        assert_eq!(inst_keys, ["id", "label", "path", "split"]);
    }

    #[test]
    fn out_of_range_label_names_instance() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"class_names":["a","b","c"],"image_shape":[4,4,3],
            "instances":[{"id":"x1","path":"images/x1.png","label":7,"split":"probe"}]}"#;
        fs::write(dir.path().join("dataset.json"), json).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Validation { context, .. }) => assert!(context.contains("x1")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_instance_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"class_names":["a"],"image_shape":[4,4,3],"instances":[]}"#;
        fs::write(dir.path().join("dataset.json"), json).unwrap();
        assert!(load_manifest(dir.path()).unwrap().instances.is_empty());
    }

    #[test]
    fn sampling_clamps_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &[12, 50]);
        assert_eq!(m.sample_class_images(0, 50, 1).unwrap().len(), 12);
        let all = m.sample_class_images(1, 50, 1).unwrap();
        assert_eq!(all.len(), 50);
        let a = m.sample_class_images(1, 20, 9).unwrap();
        let b = m.sample_class_images(1, 20, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.label == 1 && i.split == Split::Probe));
        let m2 = DatasetManifest::new(vec!["a".into(), "b".into()], [4, 4, 3], vec![], dir.path()).unwrap();
        assert!(matches!(m2.sample_class_images(1, 5, 0), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn grayscale_png_is_replicated_and_wrong_size_rejected() {
        let gray = Tensor::new(vec![4, 4, 1], (0..16).map(|i| i as f32 / 15.0).collect()).unwrap();
        let png = encode_png(&gray).unwrap();
        let t = decode_png(&png, [4, 4, 3]).unwrap();
        assert_eq!(t.shape(), &[4, 4, 3]);
        for p in 0..16 {
            assert_eq!(t.data()[p * 3], t.data()[p * 3 + 2]);
        }
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(matches!(decode_png(&png, [5, 4, 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_means_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &[2, 2]);
        let a = m.channel_means().unwrap();
        let b = m.channel_means().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        // (64/255 + 128/255) / 2 after 8-bit quantization of 0.25 and 0.5.
        assert!((a[0] - (64.0 + 128.0) / 510.0).abs() < 1e-6);
    }
}
