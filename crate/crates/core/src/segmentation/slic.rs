//! SLIC superpixels: k-means over (CIELAB, scaled position) restricted to a
//! 2S x 2S window per center, followed by connectivity enforcement.

use std::collections::VecDeque;

use super::color::srgb_to_lab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(n_segments: usize) -> Self {
        SlicParams { n_segments, compactness: 10.0, iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superpixels {
    pub height: usize,
    pub width: usize,
    /// Row-major label per pixel, contiguous from 0.
    pub labels: Vec<usize>,
    pub n_labels: usize,
    /// Grid interval S.
    pub grid_interval: f64,
    /// Sum over pixels of squared combined distance D² to the assigned
    /// center, recorded after each iteration (before connectivity enforcement).
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    y: f64,
    x: f64,
}

fn lab_image(image: &Tensor) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let shape = image.shape();
    let (h, w, c) = match shape {
        [h, w, c] if *c == 1 || *c == 3 => (*h, *w, *c),
        _ => return Err(Error::Shape(format!("SLIC needs an (h, w, 1|3) image, got {shape:?}"))),
    };
    let data = image.data();
    let lab = (0..h * w)
        .map(|p| {
            let px = &data[p * c..(p + 1) * c];
            let rgb = if c == 1 { [px[0] as f64; 3] } else { [px[0] as f64, px[1] as f64, px[2] as f64] };
            srgb_to_lab(rgb.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect();
    Ok((h, w, lab))
}

fn sq(v: f64) -> f64 {
    v * v
}

fn color_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    sq(a[0] - b[0]) + sq(a[1] - b[1]) + sq(a[2] - b[2])
}

/// Segments `image` into roughly `params.n_segments` 4-connected superpixels.
pub fn slic(image: &Tensor, params: &SlicParams) -> Result<Superpixels> {
    let (h, w, lab) = lab_image(image)?;
    let n_pixels = h * w;
    if params.n_segments < 2 {
        return Err(Error::Parameter("SLIC needs n_segments >= 2".into()));
    }
    if params.n_segments > n_pixels {
        return Err(Error::Parameter(format!(
            "n_segments {} exceeds pixel count {n_pixels}",
            params.n_segments
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::Parameter("compactness must be positive".into()));
    }

    let s = (n_pixels as f64 / params.n_segments as f64).sqrt();
    let mut centers = initial_centers(h, w, params.n_segments, &lab);
    let spatial_weight = sq(params.compactness / s);

    let dist2 = |p: usize, c: &Center| -> f64 {
        let (py, px) = ((p / w) as f64, (p % w) as f64);
        color_dist2(&lab[p], &c.lab) + spatial_weight * (sq(py - c.y) + sq(px - c.x))
    };

    let mut labels: Vec<Option<usize>> = vec![None; n_pixels];
    let mut best = vec![f64::INFINITY; n_pixels];
    let mut history = Vec::with_capacity(params.iterations);

    for _ in 0..params.iterations.max(1) {
        // A pixel keeps its current center unless a window center is strictly closer.
        for p in 0..n_pixels {
            best[p] = labels[p].map_or(f64::INFINITY, |l| dist2(p, &centers[l]));
        }
        for (k, c) in centers.iter().enumerate() {
            let y0 = (c.y - s).ceil().max(0.0) as usize;
            let y1 = ((c.y + s).floor() as isize).min(h as isize - 1);
            let x0 = (c.x - s).ceil().max(0.0) as usize;
            let x1 = ((c.x + s).floor() as isize).min(w as isize - 1);
            if y1 < 0 || x1 < 0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let p = y * w + x;
                    let d = dist2(p, c);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = Some(k);
                    }
                }
            }
        }
        for p in 0..n_pixels {
            if labels[p].is_none() {
                let (k, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, dist2(p, c)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                labels[p] = Some(k);
                best[p] = d;
            }
        }

        // Move each center to the mean of its members; empty centers stay put.
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for p in 0..n_pixels {
            let k = labels[p].expect("assigned");
            let acc = &mut sums[k];
            acc[0] += lab[p][0];
            acc[1] += lab[p][1];
            acc[2] += lab[p][2];
            acc[3] += (p / w) as f64;
            acc[4] += (p % w) as f64;
            acc[5] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                let n = acc[5];
                *c = Center { lab: [acc[0] / n, acc[1] / n, acc[2] / n], y: acc[3] / n, x: acc[4] / n };
            }
        }
        let objective: f64 = (0..n_pixels).map(|p| dist2(p, &centers[labels[p].expect("assigned")])).sum();
        history.push(objective);
    }

    let raw: Vec<usize> = labels.into_iter().map(|l| l.expect("assigned")).collect();
    let min_size = ((s * s) / 4.0).floor().max(1.0) as usize;
    let (labels, n_labels) = enforce_connectivity(h, w, &raw, min_size);
    Ok(Superpixels { height: h, width: w, labels, n_labels, grid_interval: s, objective_history: history })
}

/// Near-square grid of about `n_segments` centers at cell midpoints, each nudged to the lowest-gradient pixel
/// of its 3x3 neighborhood when that pixel is strictly flatter.
fn initial_centers(h: usize, w: usize, n_segments: usize, lab: &[[f64; 3]]) -> Vec<Center> {
    let nx = ((n_segments as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let ny = ((n_segments as f64 / nx as f64).round() as usize).clamp(1, h);
    let (sy, sx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let gradient = |y: usize, x: usize| -> f64 {
        let at = |yy: usize, xx: usize| &lab[yy * w + xx];
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        color_dist2(at(y, xr), at(y, xl)) + color_dist2(at(yd, x), at(yu, x))
    };
    let mut centers = Vec::with_capacity(ny * nx);
    for gy in 0..ny {
        for gx in 0..nx {
            let cy = (gy as f64 + 0.5) * sy - 0.5;
            let cx = (gx as f64 + 0.5) * sx - 0.5;
            let (ry, rx) = ((cy.round() as usize).min(h - 1), (cx.round() as usize).min(w - 1));
            let mut best = (gradient(ry, rx), ry, rx);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (ry as isize + dy, rx as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let g = gradient(yy as usize, xx as usize);
                    if g < best.0 {
                        best = (g, yy as usize, xx as usize);
                    }
                }
            }
            let (y, x) = if (best.1, best.2) == (ry, rx) { (cy, cx) } else { (best.1 as f64, best.2 as f64) };
            centers.push(Center { lab: lab[best.1 * w + best.2], y, x });
        }
    }
    centers
}

/// Splits labels into 4-connected components, merges components smaller than
/// `min_size` into their largest adjacent region and relabels from 0 in raster
/// order.
pub fn enforce_connectivity(h: usize, w: usize, labels: &[usize], min_size: usize) -> (Vec<usize>, usize) {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbors4(p, h, w) {
                if comp[q] == usize::MAX && labels[q] == labels[start] {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    let n_comp = sizes.len();
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for p in 0..n {
        for q in neighbors4(p, h, w) {
            let (a, b) = (comp[p], comp[q]);
            if a != b && !adjacent[a].contains(&b) {
                adjacent[a].push(b);
            }
        }
    }
    for adj in &mut adjacent {
        adj.sort_unstable();
    }

    // region[c] = surviving component that absorbs c.
    let mut region: Vec<Option<usize>> = (0..n_comp).map(|c| (sizes[c] >= min_size).then_some(c)).collect();
    if region.iter().all(Option::is_none) {
        let largest = (0..n_comp).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
        region[largest] = Some(largest);
    }
    let mut region_size: Vec<usize> = sizes.clone();
    loop {
        let mut progressed = false;
        let mut pending = false;
        for c in 0..n_comp {
            if region[c].is_some() {
                continue;
            }
            pending = true;
            let target = adjacent[c]
                .iter()
                .filter_map(|&a| region[a])
                .fold(None, |best: Option<usize>, r| match best {
                    Some(b) if region_size[b] >= region_size[r] => Some(b),
                    _ => Some(r),
                });
            if let Some(r) = target {
                region[c] = Some(r);
                region_size[r] += sizes[c];
                progressed = true;
            }
        }
        if !pending || !progressed {
            break;
        }
    }

    let mut relabel = vec![usize::MAX; n_comp];
    let mut next = 0;
    let mut out = vec![0; n];
    for p in 0..n {
        let r = region[comp[p]].expect("every component reaches a surviving region");
        if relabel[r] == usize::MAX {
            relabel[r] = next;
            next += 1;
        }
        out[p] = relabel[r];
    }
    (out, next)
}

pub(crate) fn neighbors4(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}
