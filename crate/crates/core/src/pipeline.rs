//! End-to-end run: predictions, segmentation, concept discovery, TCAV
//! filtering, clustering, layouts and influence, persisted as a snapshot.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::predict_all;
use crate::clustering::{cluster_concepts, default_k_range, select_cluster_count, ClusteringConfig};
use crate::data::{encode_png, load_manifest, DatasetManifest, InstanceMeta, Split};
use crate::discovery::{discover_concepts, ConceptRecord, DiscoveryInput, DiscoveryParams, EmbeddingMode, LayerProbe};
use crate::error::{Error, Result};
use crate::model::{load_model, ModelGraph};
use crate::rng::derive_seed;
use crate::segmentation::{extract_segments, segment_thumbnail, segment_to_patch, Segment, SlicParams};
use crate::snapshot::{
    save_snapshot, seal, ClassLayout, ClusterSelection, ConceptLayout, ConceptSpaceSnapshot, InfluenceMatrix, SegmentInfo,
    SnapshotConcept,
};
use crate::spatial::{build_cliques, cluster_boundaries, embed_2d, isomatch_layout, ClassPoint, Point, TsneParams};
use crate::tcav::{class_gradients, filter_concepts, tcav_ensemble, Cav, CavParams, EmbeddingPool, TcavParams};

/// Thumbnails stored per concept, closest members first.
pub const PATCHES_PER_CONCEPT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_path: PathBuf,
    pub model_path: PathBuf,
    pub layer: String,
    pub embedding: EmbeddingMode,
    pub images_per_class: usize,
    pub segment_resolutions: Vec<usize>,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub min_segment_pixels: usize,
    pub concepts_per_class: usize,
    pub keep_fraction: f64,
    pub min_concept_size: usize,
    pub min_distinct_images: usize,
    pub n_cavs: usize,
    pub alpha: f64,
    pub clustering: ClusteringConfig,
    pub perplexity: f64,
    pub merge_distance_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset_path: PathBuf::new(),
            model_path: PathBuf::new(),
            layer: String::new(),
            embedding: EmbeddingMode::default(),
            images_per_class: 50,
            segment_resolutions: vec![15, 50, 80],
            compactness: 10.0,
            slic_iterations: 10,
            min_segment_pixels: 9,
            concepts_per_class: 10,
            keep_fraction: 0.9,
            min_concept_size: 10,
            min_distinct_images: 3,
            n_cavs: 20,
            alpha: 0.01,
            clustering: ClusteringConfig::default(),
            perplexity: 30.0,
            merge_distance_fraction: 0.04,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation("pipeline config", m));
        if self.layer.is_empty() {
            return bad("layer is required".into());
        }
        for (name, v) in [
            ("images_per_class", self.images_per_class),
            ("slic_iterations", self.slic_iterations),
            ("min_segment_pixels", self.min_segment_pixels),
            ("concepts_per_class", self.concepts_per_class),
            ("min_concept_size", self.min_concept_size),
            ("min_distinct_images", self.min_distinct_images),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_cavs < 2 {
            return bad(format!("n_cavs = {} must be at least 2", self.n_cavs));
        }
        if self.segment_resolutions.is_empty() || self.segment_resolutions.contains(&0) {
            return bad("segment_resolutions must be a non-empty list of positive counts".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} must be in (0, 1)", self.alpha));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("keep_fraction = {} must be in (0, 1]", self.keep_fraction));
        }
        if !(self.compactness > 0.0) || !(self.perplexity >= 1.0) || !(self.merge_distance_fraction >= 0.0) {
            return bad("compactness must be positive, perplexity at least 1, merge_distance_fraction non-negative".into());
        }
        if self.clustering.n_clusters == Some(0) {
            return bad("clustering.n_clusters must be at least 1".into());
        }
        Ok(())
    }

    /// Resolves relative dataset and model paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.dataset_path, &mut self.model_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Fingerprint of the fields the scoring stage depends on. Clustering and
    /// layout parameters are left out so that re-runs which only change them
    /// reuse the trained CAVs.
    fn scoring_fingerprint(&self) -> Result<String> {
        let defaults = PipelineConfig::default();
        digest(&PipelineConfig {
            clustering: defaults.clustering,
            perplexity: defaults.perplexity,
            merge_distance_fraction: defaults.merge_distance_fraction,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Queued,
    Segmenting,
    Discovering,
    Scoring,
    Filtering,
    Clustering,
    Layouting,
    Persisting,
    Done,
    Failed,
}

impl Stage {
    fn progress(self) -> f64 {
        match self {
            Stage::Failed => 1.0,
            s => s as u8 as f64 / Stage::Done as u8 as f64,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub stage: Stage,
    pub progress: f64,
    pub warnings: Vec<String>,
    pub snapshot_id: Option<String>,
    /// Stage at which the run failed and the cause.
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
}

impl RunStatus {
    pub fn new(run_id: impl Into<String>) -> Self {
        RunStatus {
            run_id: run_id.into(),
            stage: Stage::Queued,
            progress: 0.0,
            warnings: vec![],
            snapshot_id: None,
            failed_stage: None,
            error: None,
        }
    }

    /// Moves to `stage`. Stages only move forward and terminal stages are final.
    pub fn advance(&mut self, stage: Stage) -> Result<()> {
        if matches!(self.stage, Stage::Done | Stage::Failed) || stage <= self.stage {
            return Err(Error::Precondition(format!("run {} cannot move from {} to {stage}", self.run_id, self.stage)));
        }
        self.stage = stage;
        self.progress = stage.progress();
        Ok(())
    }

    pub fn fail(&mut self, error: &PipelineError) {
        if matches!(self.stage, Stage::Done | Stage::Failed) {
            return;
        }
        self.failed_stage = Some(error.stage);
        self.error = Some(error.source.to_string());
        self.stage = Stage::Failed;
        self.progress = 1.0;
    }
}

/// Receives progress from a running pipeline.
pub trait RunObserver: Sync {
    fn stage(&self, _stage: Stage) {}
    fn warning(&self, _message: &str) {}
}

impl RunObserver for () {}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed at {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// A probe segment with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSegment {
    pub segment: Segment,
    pub class_k: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentingCheckpoint {
    samples: Vec<Vec<String>>,
    segments: Vec<EmbeddedSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoredConcept {
    record: ConceptRecord,
    centroid: Vec<f32>,
    cavs: Vec<Cav>,
}

struct Checkpoints {
    dir: Option<PathBuf>,
}

impl Checkpoints {
    fn path(&self, name: &str, key: &str) -> Option<PathBuf> {
        Some(self.dir.as_ref()?.join(format!("{name}-{key}.json")))
    }

    fn load<T: for<'de> Deserialize<'de>>(&self, name: &str, key: &str) -> Option<T> {
        let bytes = fs::read(self.path(name, key)?).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn store<T: Serialize>(&self, name: &str, key: &str, value: &T) -> Result<()> {
        let (Some(dir), Some(path)) = (&self.dir, self.path(name, key)) else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(".{name}-{key}.json.{}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(value)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn remove(&self, name: &str, key: &str) {
        if let Some(path) = self.path(name, key) {
            let _ = fs::remove_file(path);
        }
    }
}

/// Everything the segmenting stage depends on. Runs that differ only in
/// seed or downstream parameters but sample the same images share it.
#[derive(Serialize)]
struct SegmentingKey<'a> {
    dataset_path: &'a Path,
    model_path: &'a Path,
    layer: &'a str,
    embedding: EmbeddingMode,
    segment_resolutions: &'a [usize],
    compactness: f64,
    slic_iterations: usize,
    min_segment_pixels: usize,
    channel_means: &'a [f64],
    samples: &'a [Vec<String>],
}

fn digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(&Sha256::digest(serde_json::to_vec(value)?)[..8]))
}

struct Run<'a> {
    config: &'a PipelineConfig,
    observer: &'a dyn RunObserver,
    stage: Stage,
    warnings: Vec<String>,
}

impl Run<'_> {
    fn enter(&mut self, stage: Stage) {
        self.stage = stage;
        self.observer.stage(stage);
    }

    fn warn(&mut self, message: String) {
        self.observer.warning(&message);
        self.warnings.push(message);
    }

    fn fail<T>(&self, r: Result<T>) -> std::result::Result<T, PipelineError> {
        r.map_err(|source| PipelineError { stage: self.stage, source })
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub snapshot: ConceptSpaceSnapshot,
    pub path: PathBuf,
}

/// Runs every stage and writes the snapshot under `out_root`. Outputs of the
/// segmenting and scoring stages are checkpointed under
/// `out_root/.checkpoints`, keyed by the inputs of each stage, so a failed
/// run resumes after its last completed expensive stage. Scoring checkpoints
/// are removed once the snapshot is saved; segmenting checkpoints are kept
/// and reused by later runs over the same sampled images.
pub fn run_pipeline(
    config: &PipelineConfig,
    out_root: impl AsRef<Path>,
    observer: &dyn RunObserver,
) -> std::result::Result<PipelineOutput, PipelineError> {
    let out_root = out_root.as_ref();
    let checkpoints = Checkpoints { dir: Some(out_root.join(".checkpoints")) };
    let snapshot = build(config, observer, &checkpoints)?;
    let snapshot = seal(snapshot).map_err(|source| PipelineError { stage: Stage::Persisting, source })?;
    let path = save_snapshot(&snapshot, out_root).map_err(|source| PipelineError { stage: Stage::Persisting, source })?;
    if let Ok(fp) = config.scoring_fingerprint() {
        checkpoints.remove("scoring", &fp);
    }
    observer.stage(Stage::Done);
    Ok(PipelineOutput { snapshot, path })
}

/// Runs every stage in memory and returns the sealed snapshot without
/// writing anything.
pub fn compute_snapshot(config: &PipelineConfig, observer: &dyn RunObserver) -> std::result::Result<ConceptSpaceSnapshot, PipelineError> {
    let snapshot = build(config, observer, &Checkpoints { dir: None })?;
    seal(snapshot).map_err(|source| PipelineError { stage: Stage::Persisting, source })
}

fn build(
    config: &PipelineConfig,
    observer: &dyn RunObserver,
    checkpoints: &Checkpoints,
) -> std::result::Result<ConceptSpaceSnapshot, PipelineError> {
    let mut run = Run { config, observer, stage: Stage::Queued, warnings: vec![] };
    run.enter(Stage::Queued);
    run.fail(config.validate())?;
    let manifest = run.fail(load_manifest(&config.dataset_path))?;
    let model = run.fail(load_model(&config.model_path))?;
    if model.class_names() != manifest.class_names.as_slice() {
        return run.fail(Err(Error::validation(
            "pipeline",
            format!("model classes {:?} differ from dataset classes {:?}", model.class_names(), manifest.class_names),
        )));
    }
    let probe = run.fail(LayerProbe::new(&model, &config.layer, config.embedding))?;

    run.enter(Stage::Segmenting);
    let predicted = predict_all(&model, &manifest);
    for f in &predicted.failures {
        run.warn(format!("instance {} skipped: {}", f.instance_id, f.message));
    }
    let channel_means = run.fail(manifest.channel_means())?;
    let samples = sample_images(&mut run, &manifest);
    let samples = run.fail(samples)?;
    let sample_ids: Vec<Vec<String>> = samples.iter().map(|s| s.iter().map(|i| i.instance_id.clone()).collect()).collect();
    let seg_key = run.fail(digest(&SegmentingKey {
        dataset_path: &config.dataset_path,
        model_path: &config.model_path,
        layer: &config.layer,
        embedding: config.embedding,
        segment_resolutions: &config.segment_resolutions,
        compactness: config.compactness,
        slic_iterations: config.slic_iterations,
        min_segment_pixels: config.min_segment_pixels,
        channel_means: &channel_means,
        samples: &sample_ids,
    }))?;
    let seg = match checkpoints.load::<SegmentingCheckpoint>("segmenting", &seg_key) {
        Some(c) => c,
        None => {
            let c = segment_and_embed(run.config, &samples, &manifest, &probe, &channel_means);
            let c = run.fail(c)?;
            run.fail(checkpoints.store("segmenting", &seg_key, &c))?;
            c
        }
    };
    let n_classes = manifest.num_classes();

    run.enter(Stage::Discovering);
    let params = DiscoveryParams {
        k_concepts: config.concepts_per_class,
        keep_fraction: config.keep_fraction,
        min_concept_size: config.min_concept_size,
        min_distinct_images: config.min_distinct_images,
        ..DiscoveryParams::default()
    };
    let discovered = run.fail(
        (0..n_classes)
            .into_par_iter()
            .map(|k| {
                let inputs: Vec<DiscoveryInput<'_>> = seg
                    .segments
                    .iter()
                    .filter(|s| s.class_k == k)
                    .map(|s| DiscoveryInput { segment_id: &s.segment.segment_id, instance_id: &s.segment.instance_id, vector: &s.vector })
                    .collect();
                discover_concepts(k, &manifest.class_names[k], &inputs, &params, derive_seed(config.seed, "discover", k as u64))
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let mut candidates = Vec::new();
    for d in discovered {
        for w in d.warnings {
            run.warn(w);
        }
        candidates.extend(d.concepts);
    }

    run.enter(Stage::Scoring);
    let index: HashMap<&str, usize> = seg.segments.iter().enumerate().map(|(i, s)| (s.segment.segment_id.as_str(), i)).collect();
    let fingerprint = run.fail(config.scoring_fingerprint())?;
    let scored: Vec<ScoredConcept> = match checkpoints.load("scoring", &fingerprint) {
        Some(s) => s,
        None => {
            let s = score_concepts(&mut run, &manifest, &probe, &seg, &index, candidates);
            let s = run.fail(s)?;
            run.fail(checkpoints.store("scoring", &fingerprint, &s))?;
            s
        }
    };

    run.enter(Stage::Filtering);
    let mut cavs_by_id: HashMap<String, Vec<Cav>> = HashMap::new();
    let records: Vec<ConceptRecord> = scored
        .into_iter()
        .map(|s| {
            cavs_by_id.insert(s.record.concept_id.clone(), s.cavs);
            ConceptRecord { centroid: s.centroid, ..s.record }
        })
        .collect();
    let (mut retained, discarded) = filter_concepts(records, config.alpha);
    if retained.is_empty() {
        run.warn("no concept passed the significance filter".into());
    }

    run.enter(Stage::Clustering);
    let centroids: Vec<Vec<f64>> = retained.iter().map(|c| c.centroid.iter().map(|&v| v as f64).collect()).collect();
    let ids: Vec<String> = retained.iter().map(|c| c.concept_id.clone()).collect();
    let clustered = cluster_stage(&mut run, &ids, &centroids);
    let (clusters, selection) = run.fail(clustered)?;
    for cluster in &clusters {
        for id in &cluster.member_concept_ids {
            if let Some(c) = retained.iter_mut().find(|c| &c.concept_id == id) {
                c.cluster_id = Some(cluster.cluster_id.clone());
            }
        }
    }

    run.enter(Stage::Layouting);
    let class_layout = class_layout(&mut run, &manifest, &probe, &predicted.predictions, &seg);
    let class_layout = run.fail(class_layout)?;
    let concept_layout = concept_layout(&mut run, &ids, &centroids, &clusters);
    let concept_layout = run.fail(concept_layout)?;
    let influence = run.fail(influence_matrices(&manifest, &probe, &retained, &cavs_by_id))?;

    run.enter(Stage::Persisting);
    let vectors: BTreeMap<&str, &[f32]> =
        seg.segments.iter().map(|s| (s.segment.segment_id.as_str(), s.vector.as_slice())).collect();
    let wrap = |records: Vec<ConceptRecord>| -> Vec<SnapshotConcept> {
        records
            .into_iter()
            .map(|r| {
                let cavs = cavs_by_id.get(&r.concept_id).cloned().unwrap_or_default();
                SnapshotConcept::new(r, cavs, &vectors)
            })
            .collect()
    };
    let concepts = wrap(retained);
    let discarded = wrap(discarded);
    let mut segments = BTreeMap::new();
    for c in concepts.iter().chain(&discarded) {
        for id in &c.record.member_segment_ids {
            let s = &seg.segments[index[id.as_str()]].segment;
            segments.insert(
                id.clone(),
                SegmentInfo { instance_id: s.instance_id.clone(), resolution_level: s.resolution_level, bbox: s.bbox },
            );
        }
    }
    let patches = run.fail(render_patches(&manifest, &seg, &index, concepts.iter().chain(&discarded), &channel_means))?;

    Ok(ConceptSpaceSnapshot {
        snapshot_id: String::new(),
        created_at: String::new(),
        config: config.clone(),
        class_names: manifest.class_names.clone(),
        embedding_dim: probe.dimension(),
        channel_means,
        predictions: predicted.predictions,
        prediction_failures: predicted.failures,
        concepts,
        discarded,
        segments,
        clusters,
        cluster_selection: selection,
        class_layout,
        concept_layout,
        influence,
        patches,
        warnings: run.warnings,
    })
}

fn sample_images(run: &mut Run<'_>, manifest: &DatasetManifest) -> Result<Vec<Vec<InstanceMeta>>> {
    let config = run.config;
    let mut samples = Vec::new();
    for k in 0..manifest.num_classes() {
        match manifest.sample_class_images(k, config.images_per_class, derive_seed(config.seed, "sample", k as u64)) {
            Ok(s) => samples.push(s),
            Err(Error::EmptyClass(_)) => {
                run.warn(format!("class {} has no probe images; no concepts discovered", manifest.class_names[k]));
                samples.push(vec![]);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(samples)
}

fn segment_and_embed(
    config: &PipelineConfig,
    samples: &[Vec<InstanceMeta>],
    manifest: &DatasetManifest,
    probe: &LayerProbe<'_>,
    channel_means: &[f64],
) -> Result<SegmentingCheckpoint> {
    let slic = SlicParams { n_segments: 0, compactness: config.compactness, iterations: config.slic_iterations };
    let jobs: Vec<&InstanceMeta> = samples.iter().flatten().collect();
    let per_image: Vec<Vec<EmbeddedSegment>> = jobs
        .par_iter()
        .map(|inst| {
            let image = manifest.load_image(inst)?;
            let segments = extract_segments(&image, &inst.instance_id, &config.segment_resolutions, &slic, config.min_segment_pixels)?;
            segments
                .into_iter()
                .map(|segment| {
                    let patch = segment_to_patch(&image, &segment, channel_means, probe.model().input_shape())?;
                    let vector = probe.embed(&patch.pixels)?;
                    Ok(EmbeddedSegment { segment, class_k: inst.label, vector })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(SegmentingCheckpoint {
        samples: samples.iter().map(|s| s.iter().map(|i| i.instance_id.clone()).collect()).collect(),
        segments: per_image.into_iter().flatten().collect(),
    })
}

fn load_images(manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<crate::tensor::Tensor>> {
    ids.par_iter()
        .map(|id| {
            let inst = manifest.instance(id).ok_or_else(|| Error::NotFound(format!("instance {id}")))?;
            manifest.load_image(inst)
        })
        .collect()
}

fn score_concepts(
    run: &mut Run<'_>,
    manifest: &DatasetManifest,
    probe: &LayerProbe<'_>,
    seg: &SegmentingCheckpoint,
    index: &HashMap<&str, usize>,
    candidates: Vec<ConceptRecord>,
) -> Result<Vec<ScoredConcept>> {
    let config = run.config;
    let mut pool = EmbeddingPool::default();
    for s in &seg.segments {
        pool.push(s.vector.clone(), s.class_k);
    }
    let gradients: Vec<Vec<Vec<f64>>> = (0..manifest.num_classes())
        .map(|k| {
            let images = load_images(manifest, &seg.samples[k])?;
            class_gradients(probe, &images, k)
        })
        .collect::<Result<_>>()?;
    let params = TcavParams { n_cavs: config.n_cavs, alpha: config.alpha, cav: CavParams::default() };
    let outcomes: Vec<_> = candidates
        .par_iter()
        .map(|c| {
            let vectors: Vec<Vec<f64>> = c
                .member_segment_ids
                .iter()
                .map(|id| seg.segments[index[id.as_str()]].vector.iter().map(|&v| v as f64).collect())
                .collect();
            let seed = derive_seed(config.seed, &format!("tcav/{}", c.concept_id), 0);
            tcav_ensemble(&vectors, &pool, c.class_k, &gradients[c.class_k], &params, seed)
        })
        .collect::<Result<_>>()?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (mut record, outcome) in candidates.into_iter().zip(outcomes) {
        for w in outcome.warnings {
            run.warn(format!("{}: {w}", record.concept_id));
        }
        record.tcav = outcome.stats;
        let centroid = std::mem::take(&mut record.centroid);
        scored.push(ScoredConcept { record, centroid, cavs: outcome.cavs });
    }
    Ok(scored)
}

fn cluster_stage(
    run: &mut Run<'_>,
    ids: &[String],
    centroids: &[Vec<f64>],
) -> Result<(Vec<crate::clustering::ConceptCluster>, Option<ClusterSelection>)> {
    let cfg = run.config.clustering;
    let n = ids.len();
    if n == 0 {
        return Ok((vec![], None));
    }
    let (k, scores, automatic) = match cfg.n_clusters {
        Some(k) if k > n => {
            return Err(Error::Parameter(format!("n_clusters = {k} exceeds the {n} retained concepts")));
        }
        Some(k) => (k, vec![], false),
        None if n < 3 => {
            run.warn(format!("{n} retained concepts: too few for silhouette selection, one cluster each"));
            (n, vec![], true)
        }
        None => {
            let (k, scores) = select_cluster_count(centroids, cfg.method, default_k_range(n), cfg.seed)?;
            (k, scores, true)
        }
    };
    let clusters = if n == 1 {
        vec![crate::clustering::ConceptCluster {
            cluster_id: "CC1".into(),
            member_concept_ids: ids.to_vec(),
            medoid_concept_id: ids[0].clone(),
        }]
    } else {
        cluster_concepts(ids, centroids, cfg.method, k, cfg.seed)?
    };
    Ok((clusters, Some(ClusterSelection { method: cfg.method, k, automatic, scores })))
}

fn tsne_params(config: &PipelineConfig) -> TsneParams {
    TsneParams { perplexity: config.perplexity, ..TsneParams::default() }
}

fn layout_points(run: &mut Run<'_>, vectors: &[Vec<f64>], stream: &str) -> Result<Vec<Point>> {
    match vectors.len() {
        0 => Ok(vec![]),
        1 => Ok(vec![[0.0, 0.0]]),
        _ => {
            let (points, note) = embed_2d(vectors, &tsne_params(run.config), derive_seed(run.config.seed, stream, 0))?;
            if let Some(note) = note {
                run.warn(format!("{stream}: {note}"));
            }
            Ok(points)
        }
    }
}

fn class_layout(
    run: &mut Run<'_>,
    manifest: &DatasetManifest,
    probe: &LayerProbe<'_>,
    predictions: &[crate::analytics::EvalPrediction],
    seg: &SegmentingCheckpoint,
) -> Result<ClassLayout> {
    let mut latents = Vec::new();
    for k in 0..manifest.num_classes() {
        let mut ids: Vec<String> =
            manifest.split(Split::Eval).filter(|i| i.label == k).map(|i| i.instance_id.clone()).collect();
        if ids.is_empty() {
            run.warn(format!("class {} has no eval images; its layout position uses probe images", manifest.class_names[k]));
            ids = seg.samples[k].clone();
        }
        if ids.is_empty() {
            continue;
        }
        let embedded: Vec<Vec<f32>> = load_images(manifest, &ids)?.par_iter().map(|img| probe.embed(img)).collect::<Result<_>>()?;
        let dim = embedded[0].len();
        let mean: Vec<f32> = (0..dim)
            .map(|d| (embedded.iter().map(|v| v[d] as f64).sum::<f64>() / embedded.len() as f64) as f32)
            .collect();
        latents.push((k, mean));
    }
    let vectors: Vec<Vec<f64>> = latents.iter().map(|(_, v)| v.iter().map(|&x| x as f64).collect()).collect();
    let positions = layout_points(run, &vectors, "class-layout")?;
    let class_points: Vec<ClassPoint> = latents
        .into_iter()
        .zip(positions)
        .map(|((class_k, mean_latent), position)| ClassPoint { class_k, position, mean_latent })
        .collect();
    let cliques = build_cliques(&class_points, predictions, run.config.merge_distance_fraction);
    Ok(ClassLayout { class_points, cliques })
}

fn concept_layout(
    run: &mut Run<'_>,
    ids: &[String],
    centroids: &[Vec<f64>],
    clusters: &[crate::clustering::ConceptCluster],
) -> Result<ConceptLayout> {
    let positions = layout_points(run, centroids, "concept-layout")?;
    let hex = isomatch_layout(ids, &positions)?;
    let cluster_of: BTreeMap<String, String> = clusters
        .iter()
        .flat_map(|c| c.member_concept_ids.iter().map(move |m| (m.clone(), c.cluster_id.clone())))
        .collect();
    let boundaries = cluster_boundaries(&hex, &cluster_of)?;
    Ok(ConceptLayout { positions: ids.iter().cloned().zip(positions).collect(), hex, boundaries })
}

fn influence_matrices(
    manifest: &DatasetManifest,
    probe: &LayerProbe<'_>,
    retained: &[ConceptRecord],
    cavs: &HashMap<String, Vec<Cav>>,
) -> Result<Vec<InfluenceMatrix>> {
    let mut out = Vec::new();
    for k in 0..manifest.num_classes() {
        let concepts: Vec<&ConceptRecord> = retained.iter().filter(|c| c.class_k == k).collect();
        if concepts.is_empty() {
            continue;
        }
        let ids: Vec<String> = manifest.split(Split::Eval).filter(|i| i.label == k).map(|i| i.instance_id.clone()).collect();
        let gradients = class_gradients(probe, &load_images(manifest, &ids)?, k)?;
        for c in concepts {
            let cav_list = &cavs[&c.concept_id];
            let s_values = gradients
                .iter()
                .map(|g| {
                    cav_list
                        .iter()
                        .map(|cav| cav.direction.iter().zip(g).map(|(&d, &gv)| d as f64 * gv).sum::<f64>() as f32)
                        .collect()
                })
                .collect();
            out.push(InfluenceMatrix { concept_id: c.concept_id.clone(), class_k: k, instance_ids: ids.clone(), s_values });
        }
    }
    Ok(out)
}

fn render_patches<'a>(
    manifest: &DatasetManifest,
    seg: &SegmentingCheckpoint,
    index: &HashMap<&str, usize>,
    concepts: impl Iterator<Item = &'a SnapshotConcept>,
    channel_means: &[f64],
) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut wanted: BTreeMap<&str, Vec<&Segment>> = BTreeMap::new();
    for c in concepts {
        for id in c.ranked_segment_ids.iter().take(PATCHES_PER_CONCEPT) {
            let s = &seg.segments[index[id.as_str()]].segment;
            wanted.entry(s.instance_id.as_str()).or_default().push(s);
        }
    }
    let rendered: Vec<Vec<(String, Vec<u8>)>> = wanted
        .par_iter()
        .map(|(instance_id, segments)| {
            let inst = manifest.instance(instance_id).ok_or_else(|| Error::NotFound(format!("instance {instance_id}")))?;
            let image = manifest.load_image(inst)?;
            segments
                .iter()
                .map(|s| Ok((s.segment_id.clone(), encode_png(&segment_thumbnail(&image, s, channel_means)?)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(rendered.into_iter().flatten().collect())
}

/// Loads the model and dataset a snapshot was computed from.
pub fn load_inputs(config: &PipelineConfig) -> Result<(DatasetManifest, ModelGraph)> {
    Ok((load_manifest(&config.dataset_path)?, load_model(&config.model_path)?))
}
