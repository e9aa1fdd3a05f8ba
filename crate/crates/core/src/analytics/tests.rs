use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng::rng;
use crate::tcav::TcavStats;

fn pred(id: &str, label: usize, predicted: usize, confidence: f64) -> EvalPrediction {
    let mut probabilities = vec![(1.0 - confidence) / 2.0; 3];
    probabilities[predicted] = confidence;
    EvalPrediction {
        prediction: Prediction {
            instance_id: id.into(),
            logits: probabilities.iter().map(|p| p.ln()).collect(),
            probabilities,
            predicted_class: predicted,
            confidence,
        },
        label,
    }
}

#[test]
fn perfect_predictions_fill_the_last_bin() {
    let preds: Vec<_> = (0..9).map(|i| pred(&format!("i{i}"), i % 3, i % 3, 0.9)).collect();
    let h = accuracy_histogram(&preds, 3, 10).unwrap();
    assert_eq!(h.counts[9], 3);
    assert_eq!(h.counts.iter().sum::<usize>(), 3);
    assert!(accuracy_histogram(&preds, 3, 0).is_err());
    assert!(accuracy_histogram(&[], 3, 10).is_err());
}

#[test]
fn accuracies_match_recount_and_empty_classes_are_excluded() {
    let preds = vec![pred("a", 0, 0, 0.9), pred("b", 0, 1, 0.6), pred("c", 0, 0, 0.8), pred("d", 1, 1, 0.7), pred("e", 1, 0, 0.7)];
    let h = accuracy_histogram(&preds, 3, 4).unwrap();
    assert_eq!(h.class_accuracy, vec![Some(2.0 / 3.0), Some(0.5), None]);
    assert_eq!(h.excluded_classes, vec![2]);
    assert_eq!(h.counts, vec![0, 0, 2, 0]);
}

#[test]
fn confusion_counts_and_ordering() {
    let preds = vec![
        pred("a", 0, 0, 0.6),
        pred("b", 0, 0, 0.9),
        pred("c", 0, 2, 0.7),
        pred("d", 1, 0, 0.8),
        pred("e", 2, 2, 0.8),
    ];
    let m = confusion(&preds, &[0, 1]).unwrap();
    assert_eq!(m.counts, vec![vec![2, 0, 1], vec![1, 0, 0]]);
    assert_eq!(m.cell_instances[0][0], vec!["b", "a"]);
    assert_eq!(m.cell_instances[0][2], vec!["c"]);
    let total: usize = m.counts.iter().flatten().sum();
    assert_eq!(total, 4);
    assert!(confusion(&preds, &[]).is_err());

    let always_a: Vec<_> = (0..6).map(|i| pred(&format!("x{i}"), i % 2, 0, 0.9)).collect();
    let m = confusion(&always_a, &[0, 1]).unwrap();
    assert_eq!(m.counts, vec![vec![3, 0, 0], vec![3, 0, 0]]);
}

#[test]
fn instance_order_follows_the_matrix_rule() {
    let preds = vec![pred("w1", 0, 1, 0.6), pred("c1", 0, 0, 0.7), pred("w2", 0, 1, 0.95), pred("c2", 0, 0, 0.9)];
    assert_eq!(order_instances(&preds), vec!["c2", "c1", "w1", "w2"]);
    let ties = vec![pred("b", 0, 0, 0.5), pred("a", 0, 0, 0.5), pred("d", 0, 1, 0.5), pred("c", 0, 1, 0.5)];
    assert_eq!(order_instances(&ties), vec!["a", "b", "c", "d"]);
}

proptest! {
    #[test]
    fn ordering_is_a_permutation(confs in prop::collection::vec((0.34f64..1.0, any::<bool>()), 0..40)) {
        let preds: Vec<_> = confs.iter().enumerate().map(|(i, &(c, ok))| pred(&format!("i{i:02}"), 0, usize::from(!ok), c)).collect();
        let mut order = order_instances(&preds);
        order.sort();
        let mut ids: Vec<String> = preds.iter().map(|p| p.id().to_string()).collect();
        ids.sort();
        prop_assert_eq!(order, ids);
    }
}

fn cav(direction: Vec<f32>) -> Cav {
    Cav { direction, bias: 0.0, validation_accuracy: 1.0, seed: 0 }
}

#[test]
fn influence_is_a_vote_fraction_matching_enumeration() {
    let mut r = rng(3);
    let cavs: Vec<Cav> = (0..20).map(|_| cav((0..4).map(|_| r.random_range(-1.0f32..1.0)).collect())).collect();
    for i in 0..4 {
        let g: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let row = influence_from_gradient(&format!("i{i}"), "c", &g, &cavs);
        let mut votes = 0;
        for (j, c) in cavs.iter().enumerate() {
            let s: f64 = (0..4).map(|d| c.direction[d] as f64 * g[d]).sum();
            assert_eq!(row.samples[j].s_value, s);
            assert_eq!(row.samples[j].positive, s > 0.0);
            votes += usize::from(s > 0.0);
        }
        assert_eq!(row.influence, Some(votes as f64 / 20.0));
    }
    let all = influence_from_gradient("i", "c", &[1.0, 1.0], &[cav(vec![1.0, 0.0]), cav(vec![0.0, 1.0])]);
    assert_eq!(all.influence, Some(1.0));
    assert_eq!(influence_from_gradient("i", "c", &[1.0], &[]).influence, None);
}

fn concept(id: &str, class_k: usize, centroid: Vec<f32>, radius: f64, cluster: &str, score: f64) -> ConceptRecord {
    ConceptRecord {
        concept_id: id.into(),
        class_k,
        display_name: id.into(),
        member_segment_ids: vec![],
        centroid,
        radius,
        tcav: Some(TcavStats {
            per_cav_scores: vec![score; 20],
            mean_score: score,
            t_statistic: 0.0,
            p_value: 0.0,
            significant: true,
            failed_cavs: 0,
        }),
        cluster_id: Some(cluster.into()),
    }
}

#[test]
fn presence_uses_the_membership_radius() {
    let c = concept("c", 0, vec![0.0, 0.0], 1.0, "CC1", 0.8);
    let segs = vec![("s1".to_string(), vec![0.5f32, 0.5]), ("s2".to_string(), vec![3.0, 0.0])];
    let p = concept_presence("i", &segs, &[&c]);
    assert!(p[0].present);
    assert_eq!(p[0].matching_segment_ids, vec!["s1"]);
    let far = concept_presence("i", &segs[1..], &[&c]);
    assert!(!far[0].present);
    assert!(concept_presence("i", &segs, &[]).is_empty());
}

#[test]
fn quantiles_interpolate_linearly() {
    let b = BoxStats::from_values(&[0.8, 0.2, 0.6, 0.4]).unwrap();
    assert!((b.q1 - 0.35).abs() < 1e-12);
    assert!((b.median - 0.5).abs() < 1e-12);
    assert!((b.q3 - 0.65).abs() < 1e-12);
    assert_eq!((b.min, b.max), (0.2, 0.8));
    assert!(BoxStats::from_values(&[]).is_none());
}

#[test]
fn summary_groups_by_cluster_frequency() {
    let one = class_concept_summary(&[0], &[concept("a", 0, vec![], 0.0, "CC1", 0.8)]);
    assert_eq!(one.cards[0].histogram.iter().sum::<usize>(), 1);
    assert_eq!(one.cards[0].histogram[8], 1);
    assert_eq!(one.cards[0].rows.len(), 1);
    let b = one.clusters[0].scores;
    assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (0.8, 0.8, 0.8, 0.8, 0.8));

    let concepts = vec![
        concept("a1", 0, vec![], 0.0, "CC2", 0.9),
        concept("a2", 0, vec![], 0.0, "CC1", 0.7),
        concept("b1", 1, vec![], 0.0, "CC2", 0.8),
        concept("b2", 1, vec![], 0.0, "CC3", 0.2),
        concept("z", 2, vec![], 0.0, "CC1", 0.9),
    ];
    let s = class_concept_summary(&[0, 1], &concepts);
    let freq: Vec<(&str, usize)> = s.clusters.iter().map(|c| (c.cluster_id.as_str(), c.frequency)).collect();
    assert_eq!(freq, vec![("CC2", 2), ("CC1", 1), ("CC3", 1)]);
    let rows0: Vec<&str> = s.cards[0].rows.iter().map(|r| r.cluster_id.as_str()).collect();
    assert_eq!(rows0, vec!["CC2", "CC1"]);
    let rows1: Vec<&str> = s.cards[1].rows.iter().map(|r| r.cluster_id.as_str()).collect();
    assert_eq!(rows1, vec!["CC2", "CC3"]);
}
