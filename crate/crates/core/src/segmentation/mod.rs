//! Multi-resolution superpixel segments and the model-ready patches built from them.

mod color;
mod slic;

use serde::{Deserialize, Serialize};

pub use color::srgb_to_lab;
pub use slic::{enforce_connectivity, slic, SlicParams, Superpixels};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MIN_SEGMENT_PIXELS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionLevel {
    Coarse,
    Medium,
    Fine,
}

impl ResolutionLevel {
    /// Level for the `rank`-th smallest requested segment count.
    pub fn from_rank(rank: usize) -> Self {
        match rank {
            0 => ResolutionLevel::Coarse,
            1 => ResolutionLevel::Medium,
            _ => ResolutionLevel::Fine,
        }
    }
}

/// Boolean raster, serialized run-length encoded (alternating runs, starting
/// with a run of `false`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!("mask of {} bits for {height}x{width}", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![true; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box `(top, left, height, width)`, or `None` when empty.
    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (p, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = (p / self.width, p % self.width);
            bb = Some(match bb {
                None => (y, x, y, x),
                Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
            });
        }
        bb.map(|(t, l, b, r)| BBox { top: t, left: l, height: b - t + 1, width: r - l + 1 })
    }

    pub fn runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, r));
        }
        Mask::new(height, width, bits)
    }

    /// Closed outlines of the mask along pixel edges, in (x, y) pixel-corner
    /// coordinates. Outer boundaries run clockwise on screen, holes counter-clockwise.
    pub fn outline(&self) -> Vec<Vec<(f64, f64)>> {
        let (h, w) = (self.height, self.width);
        let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && self.get(y as usize, x as usize);
        let mut edges: Vec<((usize, usize), (usize, usize))> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                if !inside(yi - 1, xi) {
                    edges.push(((x, y), (x + 1, y)));
                }
                if !inside(yi, xi + 1) {
                    edges.push(((x + 1, y), (x + 1, y + 1)));
                }
                if !inside(yi + 1, xi) {
                    edges.push(((x + 1, y + 1), (x, y + 1)));
                }
                if !inside(yi, xi - 1) {
                    edges.push(((x, y + 1), (x, y)));
                }
            }
        }
        let mut by_start: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for (i, e) in edges.iter().enumerate() {
            by_start.entry(e.0).or_default().push(i);
        }
        let mut used = vec![false; edges.len()];
        let mut loops = Vec::new();
        for first in 0..edges.len() {
            if used[first] {
                continue;
            }
            let mut ring = vec![edges[first].0];
            let mut cur = first;
            used[cur] = true;
            loop {
                let end = edges[cur].1;
                if end == edges[first].0 {
                    break;
                }
                ring.push(end);
                let Some(&next) = by_start[&end].iter().find(|&&i| !used[i]) else { break };
                used[next] = true;
                cur = next;
            }
            loops.push(simplify_ring(ring));
        }
        loops
    }
}

fn simplify_ring(ring: Vec<(usize, usize)>) -> Vec<(f64, f64)> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = ring[(i + n - 1) % n];
        let cur = ring[i];
        let next = ring[(i + 1) % n];
        let collinear = (prev.0 == cur.0 && cur.0 == next.0) || (prev.1 == cur.1 && cur.1 == next.1);
        if !collinear {
            out.push((cur.0 as f64, cur.1 as f64));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RleMask {
    height: usize,
    width: usize,
    runs: Vec<usize>,
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleMask { height: self.height, width: self.width, runs: self.runs() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rle = RleMask::deserialize(d)?;
        Mask::from_runs(rle.height, rle.width, &rle.runs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub instance_id: String,
    pub resolution_level: ResolutionLevel,
    pub mask: Mask,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub segment_id: String,
    pub pixels: Tensor,
}

/// Segments `image` once per requested resolution and returns one [`Segment`]
/// per superpixel with at least `min_segment_pixels` pixels.
pub fn extract_segments(
    image: &Tensor,
    instance_id: &str,
    resolutions: &[usize],
    base: &SlicParams,
    min_segment_pixels: usize,
) -> Result<Vec<Segment>> {
    if resolutions.is_empty() {
        return Err(Error::Parameter("at least one segmentation resolution is required".into()));
    }
    let mut ranked: Vec<usize> = resolutions.to_vec();
    ranked.sort_unstable();
    ranked.dedup();
    let mut segments = Vec::new();
    for &n_segments in resolutions {
        let level = ResolutionLevel::from_rank(ranked.iter().position(|&r| r == n_segments).expect("present"));
        let sp = slic(image, &SlicParams { n_segments, ..*base })?;
        let mut masks = vec![vec![false; sp.height * sp.width]; sp.n_labels];
        for (p, &l) in sp.labels.iter().enumerate() {
            masks[l][p] = true;
        }
        for (label, bits) in masks.into_iter().enumerate() {
            let mask = Mask::new(sp.height, sp.width, bits)?;
            if mask.count() < min_segment_pixels.max(1) {
                continue;
            }
            let bbox = mask.bbox().expect("non-empty");
            segments.push(Segment {
                segment_id: format!("{instance_id}-s{n_segments}-{label}"),
                instance_id: instance_id.to_string(),
                resolution_level: level,
                mask,
                bbox,
            });
        }
    }
    Ok(segments)
}

/// Image canvas with pixels outside `mask` replaced by `fill`.
pub fn masked_canvas(image: &Tensor, mask: &Mask, fill: &[f64]) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != mask.height || shape[1] != mask.width {
        return Err(Error::Precondition(format!(
            "mask {}x{} does not match image {shape:?}",
            mask.height, mask.width
        )));
    }
    let c = shape[2];
    if fill.len() != c {
        return Err(Error::Precondition(format!("{} fill values for {c} channels", fill.len())));
    }
    let mut out = image.clone();
    for (p, &inside) in mask.bits().iter().enumerate() {
        if !inside {
            for (ch, &f) in fill.iter().enumerate() {
                out.data_mut()[p * c + ch] = f as f32;
            }
        }
    }
    Ok(out)
}

/// Full-canvas patch: non-mask pixels set to `channel_means`, then resized to
/// the model's input size.
pub fn segment_to_patch(image: &Tensor, segment: &Segment, channel_means: &[f64], model_input_shape: [usize; 3]) -> Result<Patch> {
    if segment.mask.count() == 0 {
        return Err(Error::Precondition(format!("segment {} has an empty mask", segment.segment_id)));
    }
    let canvas = masked_canvas(image, &segment.mask, channel_means)?;
    if canvas.shape()[2] != model_input_shape[2] {
        return Err(Error::Precondition(format!(
            "image has {} channels, model expects {}",
            canvas.shape()[2],
            model_input_shape[2]
        )));
    }
    let pixels = resize_bilinear(&canvas, model_input_shape[0], model_input_shape[1])?;
    Ok(Patch { segment_id: segment.segment_id.clone(), pixels })
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` samples
/// source coordinate `i * (in - 1) / (out - 1)`.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = image.shape();
    let [h, w, c] = *shape else {
        return Err(Error::Shape(format!("resize needs a rank-3 tensor, got {shape:?}")));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target has a zero dimension".into()));
    }
    let scale = |n_in: usize, n_out: usize| if n_out > 1 { (n_in - 1) as f64 / (n_out - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Tensor::from_f64(vec![out_h, out_w, c], &out)
}

/// Display thumbnail: the masked canvas cropped to the segment's bounding box.
pub fn segment_thumbnail(image: &Tensor, segment: &Segment, channel_means: &[f64]) -> Result<Tensor> {
    let canvas = masked_canvas(image, &segment.mask, channel_means)?;
    let c = canvas.shape()[2];
    let w = canvas.shape()[1];
    let bb = segment.bbox;
    let mut data = Vec::with_capacity(bb.height * bb.width * c);
    for y in bb.top..bb.top + bb.height {
        let row = &canvas.data()[(y * w + bb.left) * c..(y * w + bb.left + bb.width) * c];
        data.extend_from_slice(row);
    }
    Tensor::new(vec![bb.height, bb.width, c], data)
}

#[cfg(test)]
mod tests;
