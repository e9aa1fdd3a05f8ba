//! Per-class concept discovery: embed segment patches at a target layer and
//! cluster the embeddings with k-means.

use std::collections::HashSet;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::rng::rng;
use crate::segmentation::Patch;
use crate::tcav::TcavStats;
use crate::tensor::Tensor;

/// How a layer activation becomes a concept-space vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// The full activation map, flattened.
    #[default]
    Flatten,
    /// Spatial mean per channel. Directional derivatives then move every
    /// spatial position along the concept direction at once.
    GlobalAveragePool,
}

/// A model plus the layer at which concepts live.
#[derive(Debug, Clone)]
pub struct LayerProbe<'a> {
    model: &'a ModelGraph,
    layer: String,
    layer_idx: usize,
    mode: EmbeddingMode,
}

impl<'a> LayerProbe<'a> {
    /// The layer must have at least one layer above it.
    pub fn new(model: &'a ModelGraph, layer: &str, mode: EmbeddingMode) -> Result<Self> {
        let layer_idx = model.capture_index(layer)?;
        if mode == EmbeddingMode::GlobalAveragePool && model.layer_output_shape(layer)?.len() != 3 {
            return Err(Error::Parameter(format!(
                "layer `{layer}` output is not spatial; global-average-pool embedding needs (h, w, c)"
            )));
        }
        Ok(LayerProbe { model, layer: layer.to_string(), layer_idx, mode })
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn dimension(&self) -> usize {
        let shape = &self.model.layer_output_shape(&self.layer).expect("validated layer");
        match self.mode {
            EmbeddingMode::Flatten => shape.iter().product(),
            EmbeddingMode::GlobalAveragePool => shape[2],
        }
    }

    pub fn embed(&self, image: &Tensor) -> Result<Vec<f32>> {
        let act = self.model.activation(image, &self.layer)?;
        Ok(match self.mode {
            EmbeddingMode::Flatten => act.into_data(),
            EmbeddingMode::GlobalAveragePool => {
                let c = act.shape()[2];
                let n = (act.len() / c) as f64;
                let mut sums = vec![0.0f64; c];
                for (i, &v) in act.data().iter().enumerate() {
                    sums[i % c] += v as f64;
                }
                sums.into_iter().map(|s| (s / n) as f32).collect()
            }
        })
    }

    /// Gradient of logit `class_k` expressed in embedding space, so that its
    /// inner product with a concept direction is the directional derivative.
    pub fn gradient(&self, image: &Tensor, class_k: usize) -> Result<Vec<f64>> {
        let grad = self.model.gradient_f64(image, self.layer_idx, class_k)?;
        Ok(match self.mode {
            EmbeddingMode::Flatten => grad,
            EmbeddingMode::GlobalAveragePool => {
                let c = self.dimension();
                let mut summed = vec![0.0; c];
                for (i, g) in grad.into_iter().enumerate() {
                    summed[i % c] += g;
                }
                summed
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedding {
    pub segment_id: String,
    pub vector: Vec<f32>,
}

/// One embedding per patch, in input order.
pub fn embed_patches(probe: &LayerProbe<'_>, patches: &[Patch]) -> Result<Vec<PatchEmbedding>> {
    patches
        .par_iter()
        .map(|p| {
            Ok(PatchEmbedding { segment_id: p.segment_id.clone(), vector: probe.embed(&p.pixels)? })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after initialization and after every centroid update and reassignment.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inertia(vectors: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    vectors.iter().zip(assignments).map(|(v, &a)| sq_dist(v, &centroids[a])).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iterations` is reached. Empty clusters are re-seeded at the
/// point farthest from its centroid.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, max_iterations: usize) -> Result<KMeansResult> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must be in [1, {n}]")));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Parameter("vectors differ in dimensionality".into()));
    }

    let mut r = rng(seed);
    let mut centroids = vec![vectors[r.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        let c = vectors[pick].clone();
        for (di, v) in d2.iter_mut().zip(vectors) {
            *di = di.min(sq_dist(v, &c));
        }
        centroids.push(c);
    }

    let nearest = |centroids: &[Vec<f64>], current: Option<&[usize]>| -> Vec<usize> {
        vectors
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut best = current.map_or(0, |c| c[i]);
                let mut best_d = sq_dist(v, &centroids[best]);
                for (j, c) in centroids.iter().enumerate() {
                    let d = sq_dist(v, c);
                    if d < best_d || (d == best_d && j < best && current.is_none()) {
                        best = j;
                        best_d = d;
                    }
                }
                best
            })
            .collect()
    };

    let mut assignments = nearest(&centroids, None);
    let mut history = vec![inertia(vectors, &assignments, &centroids)];
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        update_centroids(vectors, &mut assignments, &mut centroids);
        history.push(inertia(vectors, &assignments, &centroids));
        let next = nearest(&centroids, Some(&assignments));
        let changed = next != assignments;
        assignments = next;
        history.push(inertia(vectors, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    let inertia = *history.last().expect("non-empty");
    Ok(KMeansResult { assignments, centroids, inertia, inertia_history: history, iterations })
}

fn mean_of(vectors: &[Vec<f64>], members: impl Iterator<Item = usize>, dim: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for i in members {
        for (s, x) in sum.iter_mut().zip(&vectors[i]) {
            *s += x;
        }
        count += 1;
    }
    (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
}

fn update_centroids(vectors: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let dim = vectors[0].len();
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for j in 0..k {
        if let Some(m) = mean_of(vectors, (0..vectors.len()).filter(|&i| assignments[i] == j), dim) {
            centroids[j] = m;
        }
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let far = (0..vectors.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .map(|i| (i, sq_dist(&vectors[i], &centroids[assignments[i]])))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((i, d)) = far else { continue };
        if d == 0.0 {
            continue;
        }
        let donor = assignments[i];
        assignments[i] = j;
        sizes[donor] -= 1;
        sizes[j] = 1;
        centroids[j] = vectors[i].clone();
        centroids[donor] = mean_of(vectors, (0..vectors.len()).filter(|&p| assignments[p] == donor), dim)
            .expect("donor keeps at least one member");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryParams {
    pub k_concepts: usize,
    pub keep_fraction: f64,
    pub min_concept_size: usize,
    pub min_distinct_images: usize,
    pub max_iterations: usize,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        DiscoveryParams {
            k_concepts: 10,
            keep_fraction: 0.9,
            min_concept_size: 10,
            min_distinct_images: 3,
            max_iterations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: String,
    pub class_k: usize,
    pub display_name: String,
    pub member_segment_ids: Vec<String>,
    #[serde(skip)]
    pub centroid: Vec<f32>,
    /// Largest member-to-centroid distance after outlier trimming.
    pub radius: f64,
    pub tcav: Option<TcavStats>,
    pub cluster_id: Option<String>,
}

/// A segment embedding together with the instance it was cut from.
#[derive(Debug, Clone, Copy)]
pub struct DiscoveryInput<'a> {
    pub segment_id: &'a str,
    pub instance_id: &'a str,
    pub vector: &'a [f32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub concepts: Vec<ConceptRecord>,
    pub warnings: Vec<String>,
}

/// Euclidean distance accumulated in double precision.
pub fn embedding_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn concept_name(class_name: &str, rank: usize) -> String {
    let slug: String = class_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("{slug}_concept_{rank}")
}

/// Clusters one class's segment embeddings into candidate concepts, trims the
/// farthest members of each cluster and drops clusters that are too small or
/// drawn from too few images. Concepts are returned largest first.
pub fn discover_concepts(
    class_k: usize,
    class_name: &str,
    inputs: &[DiscoveryInput<'_>],
    params: &DiscoveryParams,
    seed: u64,
) -> Result<Discovery> {
    let mut warnings = Vec::new();
    if inputs.is_empty() {
        warnings.push(format!("class {class_name}: no segments to cluster"));
        return Ok(Discovery { concepts: vec![], warnings });
    }
    let mut k = params.k_concepts.max(1);
    if inputs.len() < k {
        warnings.push(format!(
            "class {class_name}: only {} embeddings, reducing k from {k} to {}",
            inputs.len(),
            inputs.len()
        ));
        k = inputs.len();
    }
    let vectors: Vec<Vec<f64>> = inputs.iter().map(|e| e.vector.iter().map(|&v| v as f64).collect()).collect();
    let km = kmeans(&vectors, k, seed, params.max_iterations)?;

    let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
    for j in 0..k {
        let mut members: Vec<(usize, f64)> = (0..vectors.len())
            .filter(|&i| km.assignments[i] == j)
            .map(|i| (i, sq_dist(&vectors[i], &km.centroids[j])))
            .collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let keep = ((members.len() as f64) * params.keep_fraction).ceil() as usize;
        members.truncate(keep.max(1));
        let kept: Vec<usize> = members.into_iter().map(|(i, _)| i).collect();
        let images: HashSet<&str> = kept.iter().map(|&i| inputs[i].instance_id).collect();
        if kept.len() < params.min_concept_size || images.len() < params.min_distinct_images {
            continue;
        }
        clusters.push((j, kept));
    }
    clusters.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let concepts = clusters
        .into_iter()
        .enumerate()
        .map(|(rank, (_, kept))| {
            let dim = vectors[0].len();
            let centroid: Vec<f32> =
                mean_of(&vectors, kept.iter().copied(), dim).expect("non-empty").iter().map(|&v| v as f32).collect();
            let radius = kept
                .iter()
                .map(|&i| embedding_distance(inputs[i].vector, &centroid))
                .fold(0.0, f64::max);
            let name = concept_name(class_name, rank + 1);
            ConceptRecord {
                concept_id: format!("c{class_k}_{}", rank + 1),
                class_k,
                display_name: name,
                member_segment_ids: kept.iter().map(|&i| inputs[i].segment_id.to_string()).collect(),
                centroid,
                radius,
                tcav: None,
                cluster_id: None,
            }
        })
        .collect();
    Ok(Discovery { concepts, warnings })
}
