//! Immutable, content-addressed concept-space snapshots.
//!
//! On disk a snapshot is a directory holding `manifest.json`, `tensors.bin`
//! and `patches/{segment_id}.png`. Large float arrays (centroids, CAV
//! directions, influence s-values) live in `tensors.bin` and are referenced
//! by index from the manifest. The snapshot id is derived from a SHA-256 over
//! the manifest body (without `snapshot_id` and `created_at`), the tensor blob
//! and the patch files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{EvalPrediction, InstanceFailure};
use crate::clustering::{ClusterMethod, ConceptCluster};
use crate::discovery::{embedding_distance, ConceptRecord};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::segmentation::{BBox, ResolutionLevel};
use crate::spatial::{BoundaryEdge, ClassPoint, Clique, HexAssignment};
use crate::tcav::Cav;
use crate::tensor::{decode_tensors, encode_tensor, Tensor};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const PATCHES_DIR: &str = "patches";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// A concept with its trained CAVs and members ranked by centroid proximity.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotConcept {
    pub record: ConceptRecord,
    pub cavs: Vec<Cav>,
    pub ranked_segment_ids: Vec<String>,
}

impl SnapshotConcept {
    /// Ranks `record`'s members by distance to its centroid, ties by id.
    pub fn new(record: ConceptRecord, cavs: Vec<Cav>, vectors: &BTreeMap<&str, &[f32]>) -> Self {
        let mut ranked: Vec<(f64, String)> = record
            .member_segment_ids
            .iter()
            .map(|id| {
                let d = vectors.get(id.as_str()).map_or(f64::INFINITY, |v| embedding_distance(v, &record.centroid));
                (d, id.clone())
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        SnapshotConcept { record, cavs, ranked_segment_ids: ranked.into_iter().map(|(_, id)| id).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub instance_id: String,
    pub resolution_level: ResolutionLevel,
    pub bbox: BBox,
}

/// Raw directional derivatives of one concept's class logit for every eval
/// instance of that class: `s_values[i][j]` for instance `i` and CAV `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub concept_id: String,
    pub class_k: usize,
    pub instance_ids: Vec<String>,
    pub s_values: Vec<Vec<f32>>,
}

impl InfluenceMatrix {
    /// Fraction of CAVs with a positive s-value, per instance.
    pub fn influence(&self, row: usize) -> Option<f64> {
        let s = &self.s_values[row];
        (!s.is_empty()).then(|| s.iter().filter(|&&v| v > 0.0).count() as f64 / s.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub method: ClusterMethod,
    pub k: usize,
    /// True when `k` was picked by silhouette score.
    pub automatic: bool,
    pub scores: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub class_points: Vec<ClassPoint>,
    pub cliques: Vec<Clique>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLayout {
    /// 2D positions in concept order (before snapping to the grid).
    pub positions: BTreeMap<String, [f64; 2]>,
    pub hex: HexAssignment,
    pub boundaries: Vec<BoundaryEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSpaceSnapshot {
    pub snapshot_id: String,
    pub created_at: String,
    pub config: PipelineConfig,
    pub class_names: Vec<String>,
    pub embedding_dim: usize,
    pub channel_means: Vec<f64>,
    pub predictions: Vec<EvalPrediction>,
    pub prediction_failures: Vec<InstanceFailure>,
    /// Retained concepts, grouped by class in class order.
    pub concepts: Vec<SnapshotConcept>,
    /// Concepts dropped by the significance filter, kept for audit.
    pub discarded: Vec<SnapshotConcept>,
    pub segments: BTreeMap<String, SegmentInfo>,
    pub clusters: Vec<ConceptCluster>,
    pub cluster_selection: Option<ClusterSelection>,
    pub class_layout: ClassLayout,
    pub concept_layout: ConceptLayout,
    pub influence: Vec<InfluenceMatrix>,
    /// PNG bytes per segment id.
    pub patches: BTreeMap<String, Vec<u8>>,
    pub warnings: Vec<String>,
}

impl ConceptSpaceSnapshot {
    pub fn concept(&self, id: &str) -> Option<&SnapshotConcept> {
        self.concepts.iter().chain(&self.discarded).find(|c| c.record.concept_id == id)
    }

    pub fn is_retained(&self, id: &str) -> bool {
        self.concepts.iter().any(|c| c.record.concept_id == id)
    }

    pub fn cluster(&self, id: &str) -> Option<&ConceptCluster> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    pub fn influence_of(&self, concept_id: &str) -> Option<&InfluenceMatrix> {
        self.influence.iter().find(|m| m.concept_id == concept_id)
    }

    pub fn prediction(&self, instance_id: &str) -> Option<&EvalPrediction> {
        self.predictions.iter().find(|p| p.id() == instance_id)
    }

    /// Recomputes the content hash of everything except id and timestamp.
    pub fn content_id(&self) -> Result<String> {
        let (doc, blob) = self.to_parts()?;
        Ok(content_hash(&doc, &blob, &self.patches)?)
    }

    fn to_parts(&self) -> Result<(ManifestBody, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut next = 0usize;
        let mut push = |shape: Vec<usize>, data: Vec<f32>| -> Result<Option<usize>> {
            if data.is_empty() {
                return Ok(None);
            }
            encode_tensor(&mut blob, &Tensor::new(shape, data)?);
            next += 1;
            Ok(Some(next - 1))
        };
        let mut concept_doc = |c: &SnapshotConcept| -> Result<ConceptDoc> {
            let dim = c.record.centroid.len();
            let centroid = push(vec![dim], c.record.centroid.clone())?;
            let directions: Vec<f32> = c.cavs.iter().flat_map(|cav| cav.direction.iter().copied()).collect();
            let cav_dim = c.cavs.first().map_or(0, |cav| cav.direction.len());
            let cav_tensor = push(vec![c.cavs.len(), cav_dim], directions)?;
            Ok(ConceptDoc {
                record: c.record.clone(),
                centroid_tensor: centroid,
                cavs: c.cavs.iter().map(|cav| CavDoc { bias: cav.bias, validation_accuracy: cav.validation_accuracy, seed: cav.seed }).collect(),
                cav_tensor,
                ranked_segment_ids: c.ranked_segment_ids.clone(),
            })
        };
        let concepts = self.concepts.iter().map(&mut concept_doc).collect::<Result<Vec<_>>>()?;
        let discarded = self.discarded.iter().map(&mut concept_doc).collect::<Result<Vec<_>>>()?;
        let influence = self
            .influence
            .iter()
            .map(|m| {
                let cols = m.s_values.first().map_or(0, |r| r.len());
                let data: Vec<f32> = m.s_values.iter().flatten().copied().collect();
                Ok(InfluenceDoc {
                    concept_id: m.concept_id.clone(),
                    class_k: m.class_k,
                    instance_ids: m.instance_ids.clone(),
                    n_cavs: cols,
                    tensor: push(vec![m.s_values.len(), cols], data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = ManifestBody {
            format_version: SNAPSHOT_FORMAT_VERSION,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            embedding_dim: self.embedding_dim,
            channel_means: self.channel_means.clone(),
            predictions: self.predictions.clone(),
            prediction_failures: self.prediction_failures.clone(),
            concepts,
            discarded,
            segments: self.segments.clone(),
            clusters: self.clusters.clone(),
            cluster_selection: self.cluster_selection.clone(),
            class_layout: self.class_layout.clone(),
            concept_layout: self.concept_layout.clone(),
            influence,
            patch_ids: self.patches.keys().cloned().collect(),
            warnings: self.warnings.clone(),
        };
        Ok((doc, blob))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CavDoc {
    bias: f64,
    validation_accuracy: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConceptDoc {
    #[serde(flatten)]
    record: ConceptRecord,
    centroid_tensor: Option<usize>,
    cavs: Vec<CavDoc>,
    cav_tensor: Option<usize>,
    ranked_segment_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InfluenceDoc {
    concept_id: String,
    class_k: usize,
    instance_ids: Vec<String>,
    n_cavs: usize,
    tensor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestBody {
    format_version: u32,
    config: PipelineConfig,
    class_names: Vec<String>,
    embedding_dim: usize,
    channel_means: Vec<f64>,
    predictions: Vec<EvalPrediction>,
    prediction_failures: Vec<InstanceFailure>,
    concepts: Vec<ConceptDoc>,
    discarded: Vec<ConceptDoc>,
    segments: BTreeMap<String, SegmentInfo>,
    clusters: Vec<ConceptCluster>,
    cluster_selection: Option<ClusterSelection>,
    class_layout: ClassLayout,
    concept_layout: ConceptLayout,
    influence: Vec<InfluenceDoc>,
    patch_ids: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    snapshot_id: String,
    created_at: String,
    #[serde(flatten)]
    body: ManifestBody,
}

/// Just enough of the manifest to check the version before full parsing.
#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn content_hash(body: &ManifestBody, blob: &[u8], patches: &BTreeMap<String, Vec<u8>>) -> Result<String> {
    let mut h = Sha256::new();
    let json = serde_json::to_vec(body)?;
    for part in [&json[..], blob] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    for (id, bytes) in patches {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Assigns the content id and a creation timestamp.
pub fn seal(mut snapshot: ConceptSpaceSnapshot) -> Result<ConceptSpaceSnapshot> {
    snapshot.snapshot_id = snapshot.content_id()?;
    snapshot.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    Ok(snapshot)
}

fn patch_file(dir: &Path, segment_id: &str) -> PathBuf {
    dir.join(PATCHES_DIR).join(format!("{segment_id}.png"))
}

/// Writes `snapshot` into `{root}/{snapshot_id}` and returns that directory.
/// The directory appears atomically; if it already exists the snapshot is
/// content-identical and nothing is written.
pub fn save_snapshot(snapshot: &ConceptSpaceSnapshot, root: impl AsRef<Path>) -> Result<PathBuf> {
    let root = root.as_ref();
    let (body, blob) = snapshot.to_parts()?;
    let id = content_hash(&body, &blob, &snapshot.patches)?;
    if id != snapshot.snapshot_id {
        return Err(Error::Precondition(format!(
            "snapshot id {} does not match its content ({id})",
            snapshot.snapshot_id
        )));
    }
    let dest = root.join(&id);
    if dest.join(MANIFEST_FILE).is_file() {
        return Ok(dest);
    }
    let staging = root.join(format!(".staging-{id}-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let patches = staging.join(PATCHES_DIR);
    fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
    let file = ManifestFile { snapshot_id: id.clone(), created_at: snapshot.created_at.clone(), body };
    let write = |path: PathBuf, bytes: &[u8]| fs::write(&path, bytes).map_err(|e| Error::io(&path, e));
    write(staging.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&file)?)?;
    write(staging.join(TENSORS_FILE), &blob)?;
    for (segment_id, png) in &snapshot.patches {
        write(patch_file(&staging, segment_id), png)?;
    }
    match fs::rename(&staging, &dest) {
        Ok(()) => Ok(dest),
        // Lost a race with an identical writer.
        Err(_) if dest.join(MANIFEST_FILE).is_file() => {
            let _ = fs::remove_dir_all(&staging);
            Ok(dest)
        }
        Err(e) => Err(Error::io(&dest, e)),
    }
}

/// Loads and verifies a snapshot directory.
pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<ConceptSpaceSnapshot> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let probe: VersionProbe =
        serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;
    if probe.format_version != SNAPSHOT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: probe.format_version, supported: SNAPSHOT_FORMAT_VERSION });
    }
    let file: ManifestFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;
    let tensors_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&tensors_path).map_err(|e| Error::io(&tensors_path, e))?;
    let mut patches = BTreeMap::new();
    for id in &file.body.patch_ids {
        let path = patch_file(dir, id);
        let png = fs::read(&path).map_err(|e| Error::Corruption(format!("missing patch {}: {e}", path.display())))?;
        patches.insert(id.clone(), png);
    }
    let actual = content_hash(&file.body, &blob, &patches)?;
    if actual != file.snapshot_id {
        return Err(Error::Corruption(format!(
            "content hash {actual} does not match snapshot id {}",
            file.snapshot_id
        )));
    }
    let tensors = decode_tensors(&blob).map_err(|e| Error::Corruption(e.to_string()))?;
    let tensor = |idx: Option<usize>| -> Result<Option<&Tensor>> {
        idx.map(|i| tensors.get(i).ok_or_else(|| Error::Corruption(format!("tensor index {i} out of range"))))
            .transpose()
    };

    let concept = |doc: &ConceptDoc| -> Result<SnapshotConcept> {
        let mut record = doc.record.clone();
        record.centroid = tensor(doc.centroid_tensor)?.map_or_else(Vec::new, |t| t.data().to_vec());
        let cavs = match tensor(doc.cav_tensor)? {
            Some(t) => {
                let dim = t.shape()[1];
                if t.shape()[0] != doc.cavs.len() {
                    return Err(Error::Corruption(format!("CAV count mismatch for {}", record.concept_id)));
                }
                doc.cavs
                    .iter()
                    .zip(t.data().chunks(dim))
                    .map(|(m, d)| Cav { direction: d.to_vec(), bias: m.bias, validation_accuracy: m.validation_accuracy, seed: m.seed })
                    .collect()
            }
            None => vec![],
        };
        Ok(SnapshotConcept { record, cavs, ranked_segment_ids: doc.ranked_segment_ids.clone() })
    };
    let body = &file.body;
    let influence = body
        .influence
        .iter()
        .map(|doc| {
            let s_values = match tensor(doc.tensor)? {
                Some(t) => t.data().chunks(doc.n_cavs.max(1)).map(<[f32]>::to_vec).collect(),
                None => vec![vec![]; doc.instance_ids.len()],
            };
            Ok(InfluenceMatrix {
                concept_id: doc.concept_id.clone(),
                class_k: doc.class_k,
                instance_ids: doc.instance_ids.clone(),
                s_values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConceptSpaceSnapshot {
        snapshot_id: file.snapshot_id.clone(),
        created_at: file.created_at.clone(),
        config: body.config.clone(),
        class_names: body.class_names.clone(),
        embedding_dim: body.embedding_dim,
        channel_means: body.channel_means.clone(),
        predictions: body.predictions.clone(),
        prediction_failures: body.prediction_failures.clone(),
        concepts: body.concepts.iter().map(concept).collect::<Result<_>>()?,
        discarded: body.discarded.iter().map(concept).collect::<Result<_>>()?,
        segments: body.segments.clone(),
        clusters: body.clusters.clone(),
        cluster_selection: body.cluster_selection.clone(),
        class_layout: body.class_layout.clone(),
        concept_layout: body.concept_layout.clone(),
        influence,
        patches,
        warnings: body.warnings.clone(),
    })
}

#[derive(Serialize)]
struct ExportConcept<'a> {
    #[serde(flatten)]
    record: &'a ConceptRecord,
    centroid: &'a [f32],
    cavs: &'a [Cav],
    ranked_segment_ids: &'a [String],
}

#[derive(Serialize)]
struct ExportInfluence<'a> {
    concept_id: &'a str,
    class_k: usize,
    instance_ids: &'a [String],
    s_values: &'a [Vec<f32>],
}

/// The whole snapshot as one JSON document with tensors inlined. Patch
/// images are listed by segment id only.
pub fn export_json(snapshot: &ConceptSpaceSnapshot) -> Result<serde_json::Value> {
    fn concept(c: &SnapshotConcept) -> ExportConcept<'_> {
        ExportConcept { record: &c.record, centroid: &c.record.centroid, cavs: &c.cavs, ranked_segment_ids: &c.ranked_segment_ids }
    }
    let (body, _) = snapshot.to_parts()?;
    let mut doc = serde_json::to_value(&ManifestFile {
        snapshot_id: snapshot.snapshot_id.clone(),
        created_at: snapshot.created_at.clone(),
        body,
    })?;
    doc["concepts"] = serde_json::to_value(snapshot.concepts.iter().map(concept).collect::<Vec<_>>())?;
    doc["discarded"] = serde_json::to_value(snapshot.discarded.iter().map(concept).collect::<Vec<_>>())?;
    doc["influence"] = serde_json::to_value(
        snapshot
            .influence
            .iter()
            .map(|m| ExportInfluence { concept_id: &m.concept_id, class_k: m.class_k, instance_ids: &m.instance_ids, s_values: &m.s_values })
            .collect::<Vec<_>>(),
    )?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub text: String,
    pub created_at: String,
}

/// Cluster annotations for every snapshot under one root, stored beside the
/// snapshots in `annotations.json`: snapshot id -> cluster id -> entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStore {
    #[serde(flatten)]
    pub entries: BTreeMap<String, BTreeMap<String, Vec<Annotation>>>,
}

impl AnnotationStore {
    /// Reads the store for `root`; a missing file is an empty store.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(ANNOTATIONS_FILE);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Replaces the store file atomically.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(ANNOTATIONS_FILE);
        let tmp = root.join(format!(".{ANNOTATIONS_FILE}.{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn get(&self, snapshot_id: &str, cluster_id: &str) -> &[Annotation] {
        self.entries.get(snapshot_id).and_then(|m| m.get(cluster_id)).map_or(&[], Vec::as_slice)
    }

    pub fn append(&mut self, snapshot_id: &str, cluster_id: &str, text: impl Into<String>) -> Annotation {
        let entry = Annotation {
            text: text.into(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        self.entries
            .entry(snapshot_id.to_string())
            .or_default()
            .entry(cluster_id.to_string())
            .or_default()
            .push(entry.clone());
        entry
    }
}
