//! Concept activation vectors and TCAV scoring.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::discovery::{ConceptRecord, LayerProbe};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavParams {
    pub l2: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub holdout_fraction: f64,
}

impl Default for CavParams {
    fn default() -> Self {
        CavParams { l2: 1e-3, learning_rate: 0.1, steps: 500, holdout_fraction: 0.2 }
    }
}

/// Unit normal of a linear separator between concept and counterexample
/// embeddings, pointing toward the concept side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub direction: Vec<f32>,
    /// Offset in units of the direction: the decision value is `direction . x + bias`.
    pub bias: f64,
    pub validation_accuracy: f64,
    pub seed: u64,
}

impl Cav {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.direction, x) + self.bias
    }
}

fn dot(direction: &[f32], x: &[f64]) -> f64 {
    direction.iter().zip(x).map(|(&d, &v)| d as f64 * v).sum()
}

fn stratified_split(n: usize, fraction: f64, r: &mut crate::rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let n_val = ((n as f64) * fraction).floor() as usize;
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Trains an L2-regularized logistic regression by full-batch gradient
/// descent. Inputs are centered and scaled by their RMS distance to the mean
/// before training; the returned direction is in the original space.
pub fn train_cav(concept: &[Vec<f64>], counter: &[Vec<f64>], params: &CavParams, seed: u64) -> Result<Cav> {
    if concept.is_empty() || counter.is_empty() {
        return Err(Error::Training("both concept and counterexample sets must be non-empty".into()));
    }
    let dim = concept[0].len();
    if dim == 0 || concept.iter().chain(counter).any(|v| v.len() != dim) {
        return Err(Error::Training("embedding dimensions differ".into()));
    }
    // Both sides split with the same stream so that equal-sized sets hold out
    // the same positions.
    let (pos_train, pos_val) = stratified_split(concept.len(), params.holdout_fraction, &mut rng(seed));
    let (neg_train, neg_val) = stratified_split(counter.len(), params.holdout_fraction, &mut rng(seed));
    let train: Vec<(&[f64], f64)> = pos_train
        .iter()
        .map(|&i| (concept[i].as_slice(), 1.0))
        .chain(neg_train.iter().map(|&i| (counter[i].as_slice(), 0.0)))
        .collect();

    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in &train {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let spread = (train
        .iter()
        .map(|(x, _)| x.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum::<f64>()
        / n)
        .sqrt();
    if spread == 0.0 || !spread.is_finite() {
        return Err(Error::Training("all training embeddings coincide".into()));
    }
    let z: Vec<Vec<f64>> = train.iter().map(|(x, _)| x.iter().zip(&mean).map(|(v, m)| (v - m) / spread).collect()).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..params.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (zi, (_, y)) in z.iter().zip(&train) {
            let logit: f64 = w.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-logit).exp()) - y;
            for (g, v) in grad.iter_mut().zip(zi) {
                *g += err * v;
            }
            grad_b += err;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= params.learning_rate * (g / n + params.l2 * *wi);
        }
        b -= params.learning_rate * grad_b / n;
    }

    let raw: Vec<f64> = w.iter().map(|v| v / spread).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Training("separator collapsed to zero".into()));
    }
    let offset = (b - raw.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>()) / norm;
    let direction: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
    let mut cav = Cav { direction, bias: offset, validation_accuracy: 0.0, seed };

    let (eval_pos, eval_neg) = if pos_val.is_empty() && neg_val.is_empty() {
        (pos_train, neg_train)
    } else {
        (pos_val, neg_val)
    };
    let correct = eval_pos.iter().filter(|&&i| cav.decision(&concept[i]) > 0.0).count()
        + eval_neg.iter().filter(|&&i| cav.decision(&counter[i]) <= 0.0).count();
    cav.validation_accuracy = correct as f64 / (eval_pos.len() + eval_neg.len()) as f64;
    Ok(cav)
}

/// Embeddings from every class, used as the source of counterexamples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingPool {
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl EmbeddingPool {
    pub fn push(&mut self, vector: Vec<f32>, label: usize) {
        self.vectors.push(vector);
        self.labels.push(label);
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&j| self.vectors[j].iter().map(|&v| v as f64).collect()).collect()
    }

    /// Draws `size` indices of embeddings not labelled `class_k`. Falls back to
    /// sampling with replacement, with a warning, when too few are available.
    pub fn counterexamples(&self, class_k: usize, size: usize, seed: u64) -> Result<(Vec<usize>, Option<String>)> {
        let eligible: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] != class_k).collect();
        if eligible.is_empty() {
            return Err(Error::Precondition(format!("no counterexamples outside class {class_k}")));
        }
        let mut r = rng(seed);
        if eligible.len() >= size {
            let mut picked: Vec<usize> = index::sample(&mut r, eligible.len(), size).into_iter().map(|j| eligible[j]).collect();
            picked.sort_unstable();
            Ok((picked, None))
        } else {
            let picked = (0..size).map(|_| eligible[r.random_range(0..eligible.len())]).collect();
            let warning = format!(
                "class {class_k}: only {} counterexamples for a pool of {size}; sampling with replacement",
                eligible.len()
            );
            Ok((picked, Some(warning)))
        }
    }
}

pub fn directional_derivative(probe: &LayerProbe<'_>, image: &Tensor, class_k: usize, cav: &Cav) -> Result<f64> {
    Ok(dot(&cav.direction, &probe.gradient(image, class_k)?))
}

/// Fraction of gradients with a strictly positive component along the CAV.
pub fn tcav_score_from_gradients(gradients: &[Vec<f64>], cav: &Cav) -> Result<f64> {
    if gradients.is_empty() {
        return Err(Error::Precondition("no instances to score".into()));
    }
    Ok(gradients.iter().filter(|g| dot(&cav.direction, g) > 0.0).count() as f64 / gradients.len() as f64)
}

pub fn class_gradients(probe: &LayerProbe<'_>, images: &[Tensor], class_k: usize) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| probe.gradient(img, class_k)).collect()
}

pub fn tcav_score(probe: &LayerProbe<'_>, images: &[Tensor], class_k: usize, cav: &Cav) -> Result<f64> {
    tcav_score_from_gradients(&class_gradients(probe, images, class_k)?, cav)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided one-sample t-test of `samples` against `mu0`. With zero sample
/// variance the p-value is 1 when the mean equals `mu0` and 0 otherwise.
pub fn one_sample_t_test(samples: &[f64], mu0: f64) -> Result<TTest> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Parameter(format!("t-test needs at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    let dev = mean - mu0;
    if var == 0.0 {
        return Ok(if dev == 0.0 {
            TTest { t: 0.0, df, p_value: 1.0 }
        } else {
            TTest { t: dev.signum() * f64::INFINITY, df, p_value: 0.0 }
        });
    }
    let t = dev / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Parameter(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TcavParams {
    pub n_cavs: usize,
    pub alpha: f64,
    pub cav: CavParams,
}

impl Default for TcavParams {
    fn default() -> Self {
        TcavParams { n_cavs: 20, alpha: 0.01, cav: CavParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavStats {
    pub per_cav_scores: Vec<f64>,
    pub mean_score: f64,
    /// Infinite when all scores agree; serialized as `"inf"` / `"-inf"`.
    #[serde(with = "extended_float")]
    pub t_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub failed_cavs: usize,
}

/// JSON has no infinities; non-finite values travel as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcavOutcome {
    pub cavs: Vec<Cav>,
    /// `None` when more than half of the CAVs failed to train.
    pub stats: Option<TcavStats>,
    pub warnings: Vec<String>,
}

/// Trains `n_cavs` CAVs for one concept, each against its own random
/// counterexample pool of the concept's size, scores each against the class
/// gradients and tests the scores against 0.5.
pub fn tcav_ensemble(
    concept_vectors: &[Vec<f64>],
    pool: &EmbeddingPool,
    class_k: usize,
    gradients: &[Vec<f64>],
    params: &TcavParams,
    seed: u64,
) -> Result<TcavOutcome> {
    ensemble(gradients, params, |i| {
        let cav_seed = derive_seed(seed, "cav", i as u64);
        let (idx, warning) = pool.counterexamples(class_k, concept_vectors.len(), cav_seed)?;
        Ok((train_cav(concept_vectors, &pool.gather(&idx), &params.cav, cav_seed)?, warning))
    })
}

/// Baseline for a concept made of random patches. Every CAV draws a fresh
/// random set of `size` embeddings from outside `class_k` as its concept and
/// another as its counterexamples, so the scores are those of a direction
/// with no relation to the class.
pub fn random_concept_tcav(
    pool: &EmbeddingPool,
    class_k: usize,
    size: usize,
    gradients: &[Vec<f64>],
    params: &TcavParams,
    seed: u64,
) -> Result<TcavOutcome> {
    ensemble(gradients, params, |i| {
        let cav_seed = derive_seed(seed, "random-cav", i as u64);
        let (concept, w1) = pool.counterexamples(class_k, size, derive_seed(cav_seed, "concept", 0))?;
        let (counter, w2) = pool.counterexamples(class_k, size, derive_seed(cav_seed, "counter", 0))?;
        let cav = train_cav(&pool.gather(&concept), &pool.gather(&counter), &params.cav, cav_seed)?;
        Ok((cav, w1.or(w2)))
    })
}

fn ensemble<F>(gradients: &[Vec<f64>], params: &TcavParams, train: F) -> Result<TcavOutcome>
where
    F: Fn(usize) -> Result<(Cav, Option<String>)> + Sync,
{
    if params.n_cavs < 2 {
        return Err(Error::Parameter(format!("n_cavs = {} must be at least 2", params.n_cavs)));
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha = {} must be in (0, 1)", params.alpha)));
    }
    let trained: Vec<Result<(Cav, Option<String>)>> = (0..params.n_cavs).into_par_iter().map(&train).collect();

    let mut cavs = Vec::new();
    let mut warnings = Vec::new();
    let mut failed = 0;
    for (i, t) in trained.into_iter().enumerate() {
        match t {
            Ok((cav, w)) => {
                cavs.push(cav);
                warnings.extend(w);
            }
            Err(e) => {
                failed += 1;
                warnings.push(format!("cav {i}: {e}"));
            }
        }
    }
    warnings.dedup();
    if failed * 2 > params.n_cavs || cavs.len() < 2 {
        warnings.push(format!("{failed} of {} CAVs failed; concept is untestable", params.n_cavs));
        return Ok(TcavOutcome { cavs, stats: None, warnings });
    }
    let scores: Vec<f64> = cavs.iter().map(|c| tcav_score_from_gradients(gradients, c)).collect::<Result<_>>()?;
    let test = one_sample_t_test(&scores, 0.5)?;
    let stats = TcavStats {
        mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
        per_cav_scores: scores,
        t_statistic: test.t,
        p_value: test.p_value,
        significant: test.p_value < params.alpha,
        failed_cavs: failed,
    };
    Ok(TcavOutcome { cavs, stats: Some(stats), warnings })
}

/// Splits concepts into those whose TCAV scores differ significantly from
/// chance and the rest. Untested and untestable concepts are discarded.
pub fn filter_concepts(concepts: Vec<ConceptRecord>, alpha: f64) -> (Vec<ConceptRecord>, Vec<ConceptRecord>) {
    concepts.into_iter().partition(|c| c.tcav.as_ref().is_some_and(|s| s.p_value < alpha))
}
