//! Evaluation-split analytics: accuracy, confusion, per-instance influence,
//! concept presence and concept summaries for a set of classes.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split};
use crate::discovery::{embedding_distance, ConceptRecord};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Prediction};
use crate::tcav::Cav;

/// A prediction together with the instance's true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPrediction {
    #[serde(flatten)]
    pub prediction: Prediction,
    pub label: usize,
}

impl EvalPrediction {
    pub fn id(&self) -> &str {
        &self.prediction.instance_id
    }

    pub fn is_correct(&self) -> bool {
        self.prediction.predicted_class == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictAll {
    pub predictions: Vec<EvalPrediction>,
    pub failures: Vec<InstanceFailure>,
}

/// Predicts every eval-split instance in manifest order. Instances whose
/// image cannot be loaded are reported and skipped.
pub fn predict_all(model: &ModelGraph, manifest: &DatasetManifest) -> PredictAll {
    let instances: Vec<_> = manifest.split(Split::Eval).collect();
    let results: Vec<_> = instances
        .par_iter()
        .map(|inst| {
            let image = manifest.load_image(inst)?;
            let mut p = model.predict(&image)?;
            p.instance_id = inst.instance_id.clone();
            Ok::<_, Error>(EvalPrediction { prediction: p, label: inst.label })
        })
        .collect();
    let mut out = PredictAll::default();
    for (inst, r) in instances.iter().zip(results) {
        match r {
            Ok(p) => out.predictions.push(p),
            Err(e) => out.failures.push(InstanceFailure { instance_id: inst.instance_id.clone(), message: e.to_string() }),
        }
    }
    out
}

/// Per-class accuracy; `None` for classes without eval instances.
pub fn class_accuracies(predictions: &[EvalPrediction], n_classes: usize) -> Vec<Option<f64>> {
    let mut totals = vec![(0usize, 0usize); n_classes];
    for p in predictions {
        if let Some(t) = totals.get_mut(p.label) {
            t.1 += 1;
            t.0 += usize::from(p.is_correct());
        }
    }
    totals.into_iter().map(|(c, n)| (n > 0).then(|| c as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyHistogram {
    pub counts: Vec<usize>,
    pub class_accuracy: Vec<Option<f64>>,
    /// Classes without eval instances.
    pub excluded_classes: Vec<usize>,
}

/// Histogram of per-class accuracy over `[0, 1]` with equal-width bins; the
/// last bin is closed on the right.
pub fn accuracy_histogram(predictions: &[EvalPrediction], n_classes: usize, n_bins: usize) -> Result<AccuracyHistogram> {
    if n_bins == 0 {
        return Err(Error::Parameter("n_bins must be at least 1".into()));
    }
    let class_accuracy = class_accuracies(predictions, n_classes);
    let excluded_classes: Vec<usize> = (0..n_classes).filter(|&k| class_accuracy[k].is_none()).collect();
    if excluded_classes.len() == n_classes {
        return Err(Error::Precondition("no class has eval instances".into()));
    }
    let mut counts = vec![0; n_bins];
    for acc in class_accuracy.iter().flatten() {
        counts[value_bin(*acc, n_bins)] += 1;
    }
    Ok(AccuracyHistogram { counts, class_accuracy, excluded_classes })
}

fn value_bin(v: f64, n_bins: usize) -> usize {
    ((v * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1)
}

fn by_confidence_desc(a: &EvalPrediction, b: &EvalPrediction) -> Ordering {
    b.prediction.confidence.total_cmp(&a.prediction.confidence).then_with(|| a.id().cmp(b.id()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_subset: Vec<usize>,
    /// Rows follow `class_subset`; columns follow it too, plus a final
    /// column for predictions outside the subset.
    pub counts: Vec<Vec<usize>>,
    pub cell_instances: Vec<Vec<Vec<String>>>,
}

pub fn confusion(predictions: &[EvalPrediction], class_subset: &[usize]) -> Result<ConfusionMatrix> {
    if class_subset.is_empty() {
        return Err(Error::Parameter("class subset is empty".into()));
    }
    let n = class_subset.len();
    let pos = |k: usize| class_subset.iter().position(|&c| c == k);
    let mut cells: Vec<Vec<Vec<&EvalPrediction>>> = vec![vec![vec![]; n + 1]; n];
    for p in predictions {
        if let Some(row) = pos(p.label) {
            let col = pos(p.prediction.predicted_class).unwrap_or(n);
            cells[row][col].push(p);
        }
    }
    let mut counts = vec![vec![0; n + 1]; n];
    let cell_instances = cells
        .into_iter()
        .enumerate()
        .map(|(r, row)| {
            row.into_iter()
                .enumerate()
                .map(|(c, mut cell)| {
                    cell.sort_by(|a, b| by_confidence_desc(a, b));
                    counts[r][c] = cell.len();
                    cell.iter().map(|p| p.id().to_string()).collect()
                })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix { class_subset: class_subset.to_vec(), counts, cell_instances })
}

/// Correct instances by descending confidence, then misclassified ones by
/// ascending confidence; ties by instance id.
pub fn order_instances(predictions: &[EvalPrediction]) -> Vec<String> {
    let (mut right, mut wrong): (Vec<&EvalPrediction>, Vec<&EvalPrediction>) = predictions.iter().partition(|p| p.is_correct());
    right.sort_by(|a, b| by_confidence_desc(a, b));
    wrong.sort_by(|a, b| a.prediction.confidence.total_cmp(&b.prediction.confidence).then_with(|| a.id().cmp(b.id())));
    right.into_iter().chain(wrong).map(|p| p.id().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSample {
    pub instance_id: String,
    pub concept_id: String,
    pub cav_index: usize,
    pub s_value: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfluenceRow {
    pub instance_id: String,
    pub concept_id: String,
    /// Fraction of the concept's CAVs voting positive; absent for untestable concepts.
    pub influence: Option<f64>,
    pub samples: Vec<InfluenceSample>,
}

/// Influence of a concept on one instance given the gradient of the
/// concept's class logit at the concept layer.
pub fn influence_from_gradient(instance_id: &str, concept_id: &str, gradient: &[f64], cavs: &[Cav]) -> InstanceInfluenceRow {
    let samples: Vec<InfluenceSample> = cavs
        .iter()
        .enumerate()
        .map(|(i, cav)| {
            let s_value: f64 = cav.direction.iter().zip(gradient).map(|(&d, &g)| d as f64 * g).sum();
            InfluenceSample {
                instance_id: instance_id.to_string(),
                concept_id: concept_id.to_string(),
                cav_index: i,
                s_value,
                positive: s_value > 0.0,
            }
        })
        .collect();
    let influence = (!samples.is_empty())
        .then(|| samples.iter().filter(|s| s.positive).count() as f64 / samples.len() as f64);
    InstanceInfluenceRow { instance_id: instance_id.to_string(), concept_id: concept_id.to_string(), influence, samples }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPresence {
    pub instance_id: String,
    pub concept_id: String,
    pub matching_segment_ids: Vec<String>,
    pub present: bool,
}

/// A concept is present in an instance when at least one of the instance's
/// segment embeddings lies within the concept's membership radius.
pub fn concept_presence(instance_id: &str, segments: &[(String, Vec<f32>)], concepts: &[&ConceptRecord]) -> Vec<ConceptPresence> {
    concepts
        .iter()
        .map(|c| {
            let matching_segment_ids: Vec<String> = segments
                .iter()
                .filter(|(_, v)| embedding_distance(v, &c.centroid) <= c.radius)
                .map(|(id, _)| id.clone())
                .collect();
            ConceptPresence {
                instance_id: instance_id.to_string(),
                concept_id: c.concept_id.clone(),
                present: !matching_segment_ids.is_empty(),
                matching_segment_ids,
            }
        })
        .collect()
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<BoxStats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(BoxStats {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardConcept {
    pub concept_id: String,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardRow {
    pub cluster_id: String,
    pub concepts: Vec<CardConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCard {
    pub class_k: usize,
    /// Ten equal-width bins of mean TCAV score over `[0, 1]`.
    pub histogram: Vec<usize>,
    pub rows: Vec<CardRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPeriphery {
    pub cluster_id: String,
    /// Concepts of this cluster across the selected classes.
    pub frequency: usize,
    pub scores: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConceptSummary {
    pub cards: Vec<ClassCard>,
    /// Ordered by descending frequency, then cluster id.
    pub clusters: Vec<ClusterPeriphery>,
}

fn cluster_rank(id: &str) -> (usize, &str) {
    (id.strip_prefix("CC").and_then(|n| n.parse().ok()).unwrap_or(usize::MAX), id)
}

/// Card data for the selected classes: a score histogram per class and
/// per-cluster rows shared across cards. Concepts without a cluster are
/// grouped under an empty cluster id.
pub fn class_concept_summary(classes: &[usize], concepts: &[ConceptRecord]) -> ClassConceptSummary {
    let selected: Vec<&ConceptRecord> = concepts.iter().filter(|c| classes.contains(&c.class_k)).collect();
    let score = |c: &ConceptRecord| c.tcav.as_ref().map_or(0.5, |t| t.mean_score);
    let mut by_cluster: BTreeMap<&str, Vec<&ConceptRecord>> = BTreeMap::new();
    for c in &selected {
        by_cluster.entry(c.cluster_id.as_deref().unwrap_or("")).or_default().push(c);
    }
    let mut clusters: Vec<ClusterPeriphery> = by_cluster
        .iter()
        .map(|(id, members)| ClusterPeriphery {
            cluster_id: id.to_string(),
            frequency: members.len(),
            scores: BoxStats::from_values(&members.iter().map(|c| score(c)).collect::<Vec<_>>()).expect("non-empty"),
        })
        .collect();
    clusters.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| cluster_rank(&a.cluster_id).cmp(&cluster_rank(&b.cluster_id))));

    let cards = classes
        .iter()
        .map(|&k| {
            let own: Vec<&&ConceptRecord> = selected.iter().filter(|c| c.class_k == k).collect();
            let mut histogram = vec![0; 10];
            for c in &own {
                histogram[value_bin(score(c), 10)] += 1;
            }
            let rows = clusters
                .iter()
                .filter_map(|cl| {
                    let mut members: Vec<CardConcept> = own
                        .iter()
                        .filter(|c| c.cluster_id.as_deref().unwrap_or("") == cl.cluster_id)
                        .map(|c| CardConcept { concept_id: c.concept_id.clone(), mean_score: score(c) })
                        .collect();
                    members.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then_with(|| a.concept_id.cmp(&b.concept_id)));
                    (!members.is_empty()).then(|| CardRow { cluster_id: cl.cluster_id.clone(), concepts: members })
                })
                .collect();
            ClassCard { class_k: k, histogram, rows }
        })
        .collect();
    ClassConceptSummary { cards, clusters }
}

#[cfg(test)]
mod tests;
