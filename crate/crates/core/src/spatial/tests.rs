use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::model::Prediction;

fn blobs(seed: u64, k: usize, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let mut v = vec![];
    let mut labels = vec![];
    for c in 0..k {
        let center: Vec<f64> = (0..dim).map(|_| r.random_range(-20.0..20.0)).collect();
        for _ in 0..per {
            v.push(center.iter().map(|x| x + r.random_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    (v, labels)
}

fn fast() -> TsneParams {
    TsneParams { perplexity: 5.0, ..Default::default() }
}

#[test]
fn tsne_separates_blobs() {
    let (v, labels) = blobs(1, 3, 15, 10);
    let y = tsne_embed(&v, &fast(), 3).unwrap();
    let pure = (0..y.len())
        .filter(|&i| {
            let nn = (0..y.len()).filter(|&j| j != i).min_by(|&a, &b| dist(y[i], y[a]).total_cmp(&dist(y[i], y[b]))).unwrap();
            labels[nn] == labels[i]
        })
        .count();
    assert!(pure as f64 / y.len() as f64 >= 0.95);
    assert_eq!(tsne_embed(&v, &fast(), 3).unwrap(), y);
}

#[test]
fn tsne_duplicates_land_together() {
    let (mut v, _) = blobs(2, 2, 10, 5);
    v.push(v[0].clone());
    let y = tsne_embed(&v, &fast(), 9).unwrap();
    let diameter = diagonal(&y);
    assert!(dist(y[0], y[20]) < 0.01 * diameter, "{} vs {}", dist(y[0], y[20]), diameter);
}

#[test]
fn tsne_rejects_infeasible_perplexity() {
    let (v, _) = blobs(3, 1, 10, 2);
    assert!(tsne_embed(&v, &TsneParams { perplexity: 3.0, ..fast() }, 0).is_err());
    assert!(tsne_embed(&v[..3], &fast(), 0).is_err());
    assert!(tsne_embed(&v, &TsneParams { perplexity: 0.5, ..fast() }, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn bandwidth_search_hits_target_entropy(seed in 0u64..1000, n in 8usize..40, perp in 1.5f64..2.3) {
        let (v, _) = blobs(seed, 2, n / 2, 4);
        let (p, h) = conditional_affinities(&v, perp).unwrap();
        for (i, hi) in h.iter().enumerate() {
            prop_assert!((hi - perp.ln()).abs() < 1e-4);
            let row: f64 = p[i * v.len()..(i + 1) * v.len()].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn mds_reproduces_planar_distances() {
    let v = vec![vec![0.0, 0.0, 1.0], vec![3.0, 0.0, 1.0], vec![0.0, 4.0, 1.0]];
    let y = classical_mds(&v);
    assert!((dist(y[0], y[1]) - 3.0).abs() < 1e-9);
    assert!((dist(y[0], y[2]) - 4.0).abs() < 1e-9);
    assert!((dist(y[1], y[2]) - 5.0).abs() < 1e-9);
    assert_eq!(classical_mds(&[vec![1.0]]), vec![[0.0, 0.0]]);
    let (y, note) = embed_2d(&v, &TsneParams::default(), 0).unwrap();
    assert_eq!(y.len(), 3);
    assert!(note.is_some());
    let (big, _) = blobs(4, 2, 5, 3);
    let (_, note) = embed_2d(&big, &TsneParams::default(), 0).unwrap();
    assert!(note.unwrap().contains("perplexity"));
}

fn eval(id: &str, label: usize, predicted: usize, confidence: f64) -> EvalPrediction {
    EvalPrediction {
        prediction: Prediction {
            instance_id: id.into(),
            logits: vec![0.0; 3],
            probabilities: vec![1.0 / 3.0; 3],
            predicted_class: predicted,
            confidence,
        },
        label,
    }
}

fn class_points(positions: &[Point]) -> Vec<ClassPoint> {
    positions.iter().enumerate().map(|(k, &position)| ClassPoint { class_k: k, position, mean_latent: vec![] }).collect()
}

#[test]
fn clique_thresholds_and_representatives() {
    let pts = class_points(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0]]);
    let preds = vec![eval("a", 0, 0, 0.7), eval("b", 0, 0, 0.9), eval("c", 0, 1, 0.99), eval("d", 1, 0, 0.8), eval("e", 1, 0, 0.6)];
    assert_eq!(build_cliques(&pts, &preds, 0.0).len(), 3);
    let all = build_cliques(&pts, &preds, 1.0);
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].member_classes, vec![0, 1, 2]);
    let two = build_cliques(&pts, &preds, 0.04);
    assert_eq!(two.len(), 2);
    assert_eq!(two[0].member_classes, vec![0, 1]);
    assert_eq!(two[0].representative_images, vec![Some("b".to_string()), Some("d".to_string())]);
    assert_eq!(two[0].mean_accuracy, (2.0 / 3.0 + 0.0) / 2.0);
    assert!((two[0].radius / two[1].radius - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(two[1].representative_images, vec![None]);
}

proptest! {
    #[test]
    fn cliques_partition_and_match_brute_force(seed in 0u64..5000, n in 1usize..15, frac in 0.0f64..0.5) {
        let mut r = rng(seed);
        let positions: Vec<Point> = (0..n).map(|_| [r.random_range(0.0..10.0), r.random_range(0.0..10.0)]).collect();
        let cliques = build_cliques(&class_points(&positions), &[], frac);
        let mut seen: Vec<usize> = cliques.iter().flat_map(|c| c.member_classes.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        // Brute force: repeated relaxation of reachability.
        let t = frac * diagonal(&positions);
        let mut comp: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if t > 0.0 && dist(positions[i], positions[j]) <= t && comp[j] < comp[i] {
                        comp[i] = comp[j];
                        changed = true;
                    }
                }
            }
            if !changed { break; }
        }
        for c in &cliques {
            prop_assert!(c.member_classes.iter().all(|&m| comp[m] == comp[c.member_classes[0]]));
        }
        let distinct: std::collections::BTreeSet<usize> = comp.into_iter().collect();
        prop_assert_eq!(distinct.len(), cliques.len());
    }
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost[0].len()])
}

#[test]
fn hungarian_matches_brute_force_and_beats_random_permutations() {
    let mut r = rng(11);
    for trial in 0..60 {
        let n = 1 + trial % 7;
        let m = n + trial % 3;
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| r.random_range(0..100) as f64).collect()).collect();
        let a = hungarian(&cost).unwrap();
        let mut cols = a.clone();
        cols.sort();
        cols.dedup();
        assert_eq!(cols.len(), n);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, brute_force(&cost));
        let mut perm: Vec<usize> = (0..m).collect();
        for _ in 0..1000 {
            perm.shuffle(&mut r);
            assert!(total <= (0..n).map(|i| cost[i][perm[i]]).sum::<f64>());
        }
    }
    assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
    assert!(hungarian(&[]).unwrap().is_empty());
}

#[test]
fn hex_grid_geometry() {
    assert_eq!(grid_dimensions(0), (0, 0));
    assert_eq!(grid_dimensions(1), (1, 1));
    assert_eq!(grid_dimensions(5), (3, 2));
    assert_eq!(grid_dimensions(9), (3, 3));
    assert_eq!(grid_dimensions(10), (4, 3));
    assert_eq!(hex_center(0, 1), [3f64.sqrt() / 2.0, 1.5]);
    for (c, r) in [(2usize, 2usize), (2, 3)] {
        for (nc, nr) in hex_neighbors(c, r) {
            let d = dist(hex_center(c, r), hex_center(nc as usize, nr as usize));
            assert!((d - 3f64.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn isomatch_places_concepts_injectively() {
    let one = isomatch_layout(&["a".to_string()], &[[5.0, 5.0]]).unwrap();
    assert_eq!((one.cells[0].col, one.cells[0].row), (0, 0));
    let ids: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
    let same = isomatch_layout(&ids[..2], &[[1.0, 1.0], [1.0, 1.0]]).unwrap();
    assert_ne!((same.cells[0].col, same.cells[0].row), (same.cells[1].col, same.cells[1].row));
    let corners = isomatch_layout(&ids, &[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]]).unwrap();
    let placed: Vec<(usize, usize)> = corners.cells.iter().map(|c| (c.col, c.row)).collect();
    assert_eq!(placed, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    assert!(isomatch_layout(&[], &[]).unwrap().cells.is_empty());
}

fn boundary_recount(a: &HexAssignment, cluster_of: &BTreeMap<String, String>) -> usize {
    let occupant = |c: i64, r: i64| {
        a.cells.iter().find(|x| x.col as i64 == c && x.row as i64 == r).map(|x| cluster_of[&x.concept_id].clone())
    };
    let mut count = 0;
    for cell in &a.cells {
        for (nc, nr) in hex_neighbors(cell.col, cell.row) {
            match occupant(nc, nr) {
                None => count += 2,
                Some(o) if o != cluster_of[&cell.concept_id] => count += 1,
                _ => {}
            }
        }
    }
    count / 2
}

#[test]
fn boundaries_cover_perimeter_and_cluster_changes() {
    let ids: Vec<String> = (0..7).map(|i| format!("c{i}")).collect();
    let mut r = rng(5);
    let positions: Vec<Point> = (0..7).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect();
    let a = isomatch_layout(&ids, &positions).unwrap();
    let single: BTreeMap<String, String> = ids.iter().map(|i| (i.clone(), "CC1".to_string())).collect();
    let edges = cluster_boundaries(&a, &single).unwrap();
    assert!(edges.iter().all(|e| e.neighbor.is_none_or(|n| !a.cells.iter().any(|c| (c.col, c.row) == n))));
    assert_eq!(edges.len(), boundary_recount(&a, &single));

    let split: BTreeMap<String, String> = ids.iter().enumerate().map(|(i, id)| (id.clone(), format!("CC{}", 1 + i % 3))).collect();
    let edges = cluster_boundaries(&a, &split).unwrap();
    assert_eq!(edges.len(), boundary_recount(&a, &split));
    for e in &edges {
        let c = hex_center(e.cell.0, e.cell.1);
        assert!((dist(c, e.from) - 1.0).abs() < 1e-9 && (dist(c, e.to) - 1.0).abs() < 1e-9);
        assert!((dist(e.from, e.to) - 1.0).abs() < 1e-9);
    }

    let pair = HexAssignment {
        cells: vec![HexCell { concept_id: "x".into(), col: 0, row: 0 }, HexCell { concept_id: "y".into(), col: 1, row: 0 }],
        grid_cols: 2,
        grid_rows: 1,
        total_cost: 0.0,
    };
    let clusters: BTreeMap<String, String> = [("x", "CC1"), ("y", "CC2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let edges = cluster_boundaries(&pair, &clusters).unwrap();
    assert!(edges.iter().any(|e| e.cell == (0, 0) && e.neighbor == Some((1, 0))));
    assert!(cluster_boundaries(&pair, &BTreeMap::new()).is_err());
}
