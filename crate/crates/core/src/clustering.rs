//! Cross-class grouping of concepts by their centroids.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{kmeans, sq_dist};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    #[default]
    Kmeans,
    Agglomerative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub method: ClusterMethod,
    /// `None` picks the count with the best silhouette score.
    pub n_clusters: Option<usize>,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig { method: ClusterMethod::Kmeans, n_clusters: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCluster {
    pub cluster_id: String,
    pub member_concept_ids: Vec<String>,
    pub medoid_concept_id: String,
}

/// Ward linkage cut at `k` clusters. Labels follow the order in which each
/// cluster's first observation appears.
pub fn ward(vectors: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = vectors.len();
    check_k(n, k)?;
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            condensed.push(sq_dist(&vectors[i], &vectors[j]).sqrt());
        }
    }
    let dendrogram = kodama::linkage(&mut condensed, n, kodama::Method::Ward);
    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (s, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let merged = n + s;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = merged;
        parent[b] = merged;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Ok(relabel_by_first_seen(&roots))
}

/// Ward merge heights along the full dendrogram.
pub fn ward_merge_costs(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    if n < 2 {
        return vec![];
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            condensed.push(sq_dist(&vectors[i], &vectors[j]).sqrt());
        }
    }
    kodama::linkage(&mut condensed, n, kodama::Method::Ward).steps().iter().map(|s| s.dissimilarity).collect()
}

fn relabel_by_first_seen(raw: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    raw.iter()
        .map(|r| {
            let next = map.len();
            *map.entry(*r).or_insert(next)
        })
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("n_clusters = {k} must be in [1, {n}]")));
    }
    Ok(())
}

/// Partitions `vectors` into `k` groups. Labels are dense in `0..k'` where
/// `k'` is the number of non-empty groups.
pub fn cluster_vectors(vectors: &[Vec<f64>], method: ClusterMethod, k: usize, seed: u64) -> Result<Vec<usize>> {
    check_k(vectors.len(), k)?;
    match method {
        ClusterMethod::Kmeans => Ok(relabel_by_first_seen(&kmeans(vectors, k, seed, 300)?.assignments)),
        ClusterMethod::Agglomerative => ward(vectors, k),
    }
}

/// Mean silhouette over all points with Euclidean distances. Points in
/// singleton clusters contribute 0.
pub fn silhouette_score(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(Error::Parameter("one label per vector required".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Parameter("silhouette needs at least 2 non-empty clusters".into()));
    }
    let total: f64 = (0..vectors.len())
        .into_par_iter()
        .map(|i| {
            if sizes[labels[i]] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for (j, v) in vectors.iter().enumerate() {
                if j != i {
                    sums[labels[j]] += sq_dist(&vectors[i], v).sqrt();
                }
            }
            let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != labels[i] && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 { 0.0 } else { (b - a) / m }
        })
        .sum();
    Ok(total / vectors.len() as f64)
}

pub fn default_k_range(n: usize) -> std::ops::RangeInclusive<usize> {
    2..=30.min(n.saturating_sub(1))
}

/// Silhouette score for every k in `k_range` and the best k, preferring the
/// smaller k on ties.
pub fn select_cluster_count(
    vectors: &[Vec<f64>],
    method: ClusterMethod,
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<(usize, Vec<(usize, f64)>)> {
    let n = vectors.len();
    if k_range.is_empty() {
        return Err(Error::Parameter("empty k range".into()));
    }
    if *k_range.start() < 2 || *k_range.end() > n.saturating_sub(1) {
        return Err(Error::Parameter(format!(
            "k range {}..={} must lie within [2, {}]",
            k_range.start(),
            k_range.end(),
            n.saturating_sub(1)
        )));
    }
    let scores: Vec<(usize, f64)> = k_range
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|k| {
            let labels = cluster_vectors(vectors, method, k, seed)?;
            // Coincident centroids can leave k-means with fewer groups than asked.
            let score = silhouette_score(vectors, &labels).unwrap_or(-1.0);
            Ok((k, score))
        })
        .collect::<Result<_>>()?;
    Ok((best_k(&scores), scores))
}

fn best_k(scores: &[(usize, f64)]) -> usize {
    scores.iter().fold(scores[0], |best, &cur| if cur.1 > best.1 { cur } else { best }).0
}

/// Builds clusters over concept centroids, numbered `CC1`, `CC2`, ... by
/// descending size with ties broken by first member position.
pub fn cluster_concepts(
    concept_ids: &[String],
    centroids: &[Vec<f64>],
    method: ClusterMethod,
    k: usize,
    seed: u64,
) -> Result<Vec<ConceptCluster>> {
    if concept_ids.len() != centroids.len() {
        return Err(Error::Parameter("one centroid per concept required".into()));
    }
    if centroids.len() < 2 {
        return Err(Error::Precondition("clustering needs at least 2 concepts".into()));
    }
    let dim = centroids[0].len();
    if centroids.iter().any(|c| c.len() != dim) {
        return Err(Error::Parameter("centroids differ in dimensionality".into()));
    }
    let labels = cluster_vectors(centroids, method, k, seed)?;
    let n_groups = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![vec![]; n_groups];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(rank, members)| {
            let medoid = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let cost = |i: usize| members.iter().map(|&j| sq_dist(&centroids[i], &centroids[j]).sqrt()).sum::<f64>();
                    cost(a).total_cmp(&cost(b))
                })
                .expect("non-empty group");
            ConceptCluster {
                cluster_id: format!("CC{}", rank + 1),
                member_concept_ids: members.iter().map(|&i| concept_ids[i].clone()).collect(),
                medoid_concept_id: concept_ids[medoid].clone(),
            }
        })
        .collect())
}

/// 1 when both concepts share a cluster, 0 otherwise.
pub fn concept_similarity(a: &str, b: &str, clusters: &[ConceptCluster]) -> Result<u8> {
    let find = |id: &str| {
        clusters
            .iter()
            .find(|c| c.member_concept_ids.iter().any(|m| m == id))
            .map(|c| c.cluster_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("concept {id} has no cluster")))
    };
    Ok(u8::from(find(a)? == find(b)?))
}
