//! Two-dimensional layouts: exact t-SNE, class cliques and the hexagonal
//! concept map.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{class_accuracies, EvalPrediction};
use crate::error::{Error, Result};
use crate::rng::rng;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` scales the step with the point count: `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_steps: usize,
    pub momentum_switch: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_steps: 250,
            momentum_switch: 250,
        }
    }
}

const ENTROPY_TOLERANCE: f64 = 1e-5;

fn pairwise_sq(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities of one row and their Shannon entropy (nats).
fn row_affinities(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = dist.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist.iter().enumerate().map(|(j, &d)| if j == i { 0.0 } else { (-(d - min) * beta).exp() }).collect();
    let sum: f64 = p.iter().sum();
    let mut entropy = 0.0;
    for pj in p.iter_mut() {
        *pj /= sum;
        if *pj > 0.0 {
            entropy -= *pj * pj.ln();
        }
    }
    (p, entropy)
}

/// Row-conditional Gaussian affinities with per-point precision found by
/// bisection so that each row's entropy equals `ln(perplexity)`. Returns the
/// row-major matrix and the achieved entropy per row.
pub fn conditional_affinities(vectors: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = vectors.len();
    check_perplexity(n, perplexity)?;
    let dist = pairwise_sq(vectors);
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let mut best = row_affinities(row, i, beta);
            for _ in 0..200 {
                let diff = best.1 - target;
                if diff.abs() < ENTROPY_TOLERANCE {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                best = row_affinities(row, i, beta);
            }
            best
        })
        .collect();
    let entropies = rows.iter().map(|r| r.1).collect();
    Ok((rows.into_iter().flat_map(|r| r.0).collect(), entropies))
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if n < 4 {
        return Err(Error::Parameter(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let limit = (n as f64 - 1.0) / 3.0;
    if !(perplexity >= 1.0 && perplexity < limit) {
        return Err(Error::Parameter(format!("perplexity {perplexity} must lie in [1, {limit:.3})")));
    }
    Ok(())
}

/// Exact t-SNE into two dimensions.
pub fn tsne_embed(vectors: &[Vec<f64>], params: &TsneParams, seed: u64) -> Result<Vec<Point>> {
    let n = vectors.len();
    let (cond, _) = conditional_affinities(vectors, params.perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let mut r = rng(seed);
    let mut y: Vec<Point> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let learning_rate = params.learning_rate.unwrap_or((n as f64 / params.early_exaggeration / 4.0).max(50.0));
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for step in 0..params.iterations {
        let exaggeration = if step < params.exaggeration_steps { params.early_exaggeration } else { 1.0 };
        let momentum = if step < params.momentum_switch { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                total += 2.0 * q;
            }
        }
        let grad: Vec<Point> = (0..n)
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let q = num[i * n + j];
                    let mult = (exaggeration * p[i * n + j] - q / total) * q;
                    g[0] += 4.0 * mult * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * mult * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                velocity[i][d] = momentum * velocity[i][d] - learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|p| p[d] -= mean);
        }
    }
    Ok(y)
}

/// Classical multidimensional scaling into two dimensions. Each axis is
/// oriented so that its first non-zero coordinate is positive.
pub fn classical_mds(vectors: &[Vec<f64>]) -> Vec<Point> {
    let n = vectors.len();
    if n == 0 {
        return vec![];
    }
    let d = pairwise_sq(vectors);
    let mut b = DMatrix::<f64>::zeros(n, n);
    let row_mean: Vec<f64> = (0..n).map(|i| (0..n).map(|j| d[i * n + j]).sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (d[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 2]; n];
    for (axis, &e) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[e];
        if lambda <= 1e-12 {
            continue;
        }
        let col = eig.eigenvectors.column(e);
        let sign = col.iter().find(|v| v.abs() > 1e-12).map_or(1.0, |v| v.signum());
        for i in 0..n {
            out[i][axis] = sign * col[i] * lambda.sqrt();
        }
    }
    out
}

/// t-SNE when the point count and perplexity allow it, otherwise classical
/// MDS. The perplexity is lowered to fit small inputs; a note is returned
/// whenever either adjustment happens.
pub fn embed_2d(vectors: &[Vec<f64>], params: &TsneParams, seed: u64) -> Result<(Vec<Point>, Option<String>)> {
    let n = vectors.len();
    let limit = (n as f64 - 1.0) / 3.0;
    if limit <= 1.0 {
        return Ok((classical_mds(vectors), Some(format!("{n} points: classical MDS used instead of t-SNE"))));
    }
    if params.perplexity < limit {
        return Ok((tsne_embed(vectors, params, seed)?, None));
    }
    let perplexity = (limit * 0.99).max(1.0);
    let adjusted = TsneParams { perplexity, ..*params };
    let note = format!("perplexity lowered from {} to {perplexity:.3} for {n} points", params.perplexity);
    Ok((tsne_embed(vectors, &adjusted, seed)?, Some(note)))
}

fn bounds(points: &[Point]) -> Option<(Point, Point)> {
    let first = points.first()?;
    Some(points.iter().fold((*first, *first), |(lo, hi), p| {
        ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
    }))
}

fn diagonal(points: &[Point]) -> f64 {
    bounds(points).map_or(0.0, |(lo, hi)| ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt())
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPoint {
    pub class_k: usize,
    pub position: Point,
    pub mean_latent: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clique {
    pub clique_id: String,
    pub member_classes: Vec<usize>,
    pub center: Point,
    pub radius: f64,
    /// Mean eval accuracy over member classes that have eval instances.
    pub mean_accuracy: f64,
    /// One entry per member class; absent for classes without eval instances.
    pub representative_images: Vec<Option<String>>,
}

/// Fraction of the layout diagonal used as the radius of a one-class clique.
const UNIT_RADIUS_FRACTION: f64 = 0.02;

/// Single-linkage grouping of class positions: two classes share a clique
/// when a chain of classes links them with steps no longer than
/// `merge_distance_fraction` times the layout diagonal.
pub fn build_cliques(points: &[ClassPoint], predictions: &[EvalPrediction], merge_distance_fraction: f64) -> Vec<Clique> {
    let n = points.len();
    let positions: Vec<Point> = points.iter().map(|p| p.position).collect();
    let diag = diagonal(&positions);
    let threshold = merge_distance_fraction * diag;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    if threshold > 0.0 {
        for i in 0..n {
            for j in i + 1..n {
                if dist(positions[i], positions[j]) <= threshold {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let n_classes = points.iter().map(|p| p.class_k + 1).max().unwrap_or(0);
    let accuracy = class_accuracies(predictions, n_classes);
    let unit = if diag > 0.0 { UNIT_RADIUS_FRACTION * diag } else { 1.0 };
    let representative = |k: usize, correct_only: bool| {
        predictions
            .iter()
            .filter(|p| p.label == k && (!correct_only || p.is_correct()))
            .min_by(|a, b| b.prediction.confidence.total_cmp(&a.prediction.confidence).then_with(|| a.id().cmp(b.id())))
            .map(|p| p.id().to_string())
    };
    groups
        .into_values()
        .enumerate()
        .map(|(g, members)| {
            let m = members.len() as f64;
            let center = [
                members.iter().map(|&i| positions[i][0]).sum::<f64>() / m,
                members.iter().map(|&i| positions[i][1]).sum::<f64>() / m,
            ];
            let classes: Vec<usize> = members.iter().map(|&i| points[i].class_k).collect();
            let accs: Vec<f64> = classes.iter().filter_map(|&k| accuracy[k]).collect();
            Clique {
                clique_id: format!("Q{}", g + 1),
                center,
                radius: unit * m.sqrt(),
                mean_accuracy: if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 },
                representative_images: classes.iter().map(|&k| representative(k, true).or_else(|| representative(k, false))).collect(),
                member_classes: classes,
            }
        })
        .collect()
}

/// Center of a pointy-top hexagon with unit circumradius in an odd-row
/// offset grid.
pub fn hex_center(col: usize, row: usize) -> Point {
    [3f64.sqrt() * (col as f64 + 0.5 * (row & 1) as f64), 1.5 * row as f64]
}

/// The six cells sharing an edge with `(col, row)`, including cells outside
/// any grid bounds.
pub fn hex_neighbors(col: usize, row: usize) -> [(i64, i64); 6] {
    let (c, r) = (col as i64, row as i64);
    if row & 1 == 0 {
        [(c + 1, r), (c, r - 1), (c - 1, r - 1), (c - 1, r), (c - 1, r + 1), (c, r + 1)]
    } else {
        [(c + 1, r), (c + 1, r - 1), (c, r - 1), (c - 1, r), (c, r + 1), (c + 1, r + 1)]
    }
}

fn hex_corners(center: Point) -> [Point; 6] {
    std::array::from_fn(|i| {
        let a = (60.0 * i as f64 + 30.0).to_radians();
        [center[0] + a.cos(), center[1] + a.sin()]
    })
}

pub fn grid_dimensions(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (cols, n.div_ceil(cols))
}

/// Minimum-cost assignment of every row to a distinct column. Requires at
/// most as many rows as columns. Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let m = cost[0].len();
    if m < n || cost.iter().any(|r| r.len() != m) {
        return Err(Error::Parameter(format!("cost matrix must be rectangular with rows <= columns, got {n}x{m}")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Parameter("costs must be finite".into()));
    }
    // Potentials-based shortest augmenting path; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexCell {
    pub concept_id: String,
    pub col: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexAssignment {
    pub cells: Vec<HexCell>,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub total_cost: f64,
}

/// Places each concept on its own hex cell, keeping 2D neighbours close:
/// positions are stretched onto the grid extent and matched to cell centers
/// by minimum total squared distance.
pub fn isomatch_layout(concept_ids: &[String], positions: &[Point]) -> Result<HexAssignment> {
    let n = positions.len();
    if concept_ids.len() != n {
        return Err(Error::Parameter("one position per concept required".into()));
    }
    let (cols, rows) = grid_dimensions(n);
    if n == 0 {
        return Ok(HexAssignment { cells: vec![], grid_cols: 0, grid_rows: 0, total_cost: 0.0 });
    }
    let centers: Vec<Point> = (0..rows).flat_map(|r| (0..cols).map(move |c| hex_center(c, r))).collect();
    let (glo, ghi) = bounds(&centers).expect("non-empty grid");
    let (plo, phi) = bounds(positions).expect("non-empty");
    let normalized: Vec<Point> = positions
        .iter()
        .map(|p| {
            std::array::from_fn(|d| {
                let span = phi[d] - plo[d];
                if span > 0.0 {
                    glo[d] + (p[d] - plo[d]) / span * (ghi[d] - glo[d])
                } else {
                    (glo[d] + ghi[d]) / 2.0
                }
            })
        })
        .collect();
    let cost: Vec<Vec<f64>> = normalized
        .iter()
        .map(|p| centers.iter().map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).collect())
        .collect();
    let assignment = hungarian(&cost)?;
    let total_cost = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    let cells = assignment
        .iter()
        .zip(concept_ids)
        .map(|(&j, id)| HexCell { concept_id: id.clone(), col: j % cols, row: j / cols })
        .collect();
    Ok(HexAssignment { cells, grid_cols: cols, grid_rows: rows, total_cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEdge {
    pub cell: (usize, usize),
    /// The cell across the edge, when it lies inside the grid.
    pub neighbor: Option<(usize, usize)>,
    pub from: Point,
    pub to: Point,
}

/// Hex edges separating occupied cells from cells of a different cluster or
/// from unoccupied space. Edges between two occupied cells are emitted once.
pub fn cluster_boundaries(assignment: &HexAssignment, cluster_of: &BTreeMap<String, String>) -> Result<Vec<BoundaryEdge>> {
    let mut grid: BTreeMap<(usize, usize), &str> = BTreeMap::new();
    for cell in &assignment.cells {
        let cluster = cluster_of
            .get(&cell.concept_id)
            .ok_or_else(|| Error::NotFound(format!("concept {} has no cluster", cell.concept_id)))?;
        grid.insert((cell.col, cell.row), cluster);
    }
    let mut edges = Vec::new();
    for (&(col, row), &cluster) in &grid {
        let center = hex_center(col, row);
        let corners = hex_corners(center);
        for (nc, nr) in hex_neighbors(col, row) {
            let inside = nc >= 0 && nr >= 0 && (nc as usize) < assignment.grid_cols && (nr as usize) < assignment.grid_rows;
            let neighbor = inside.then_some((nc as usize, nr as usize));
            let other = neighbor.and_then(|k| grid.get(&k).copied());
            let emit = match other {
                None => true,
                Some(o) => o != cluster && (col, row) < neighbor.expect("occupied implies inside"),
            };
            if !emit {
                continue;
            }
            let ncenter = if nc >= 0 && nr >= 0 {
                hex_center(nc as usize, nr as usize)
            } else {
                // Offsets for cells left of or above the grid.
                let x = 3f64.sqrt() * (nc as f64 + 0.5 * (nr.rem_euclid(2)) as f64);
                [x, 1.5 * nr as f64]
            };
            let shared: Vec<Point> = corners.iter().copied().filter(|&p| (dist(p, ncenter) - 1.0).abs() < 1e-9).collect();
            debug_assert_eq!(shared.len(), 2);
            edges.push(BoundaryEdge { cell: (col, row), neighbor, from: shared[0], to: shared[1] });
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests;
