//! JSON bodies of the HTTP API.
//!
//! Every type deserializes with unknown fields rejected, so a client (or a
//! test) can parse a response into its type to check the schema.

use serde::{Deserialize, Serialize};

use concept_probe::analytics::{AccuracyHistogram, ClassCard, ClassConceptSummary, InstanceFailure, InstanceInfluenceRow};
use concept_probe::clustering::{ClusterMethod, ConceptCluster};
use concept_probe::data::Split;
use concept_probe::discovery::ConceptRecord;
use concept_probe::model::Prediction;
use concept_probe::pipeline::PipelineConfig;
use concept_probe::segmentation::{BBox, ResolutionLevel};
use concept_probe::snapshot::{Annotation, ClusterSelection};
use concept_probe::spatial::{BoundaryEdge, ClassPoint, Clique, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotInfo {
    pub snapshot_id: String,
    pub created_at: String,
    pub config: PipelineConfig,
    pub class_names: Vec<String>,
    pub embedding_dim: usize,
    pub retained_concepts: usize,
    pub discarded_concepts: usize,
    pub clusters: usize,
    pub warnings: Vec<String>,
    pub prediction_failures: Vec<InstanceFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class_k: usize,
    pub name: String,
    /// Absent for classes without eval instances.
    pub accuracy: Option<f64>,
    pub eval_instances: usize,
    pub position: Point,
    pub clique_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassesResponse {
    pub snapshot_id: String,
    pub classes: Vec<ClassEntry>,
    pub cliques: Vec<Clique>,
    pub histogram: AccuracyHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSummary {
    pub concept_id: String,
    pub display_name: String,
    pub class_k: usize,
    pub size: usize,
    pub mean_score: Option<f64>,
    pub p_value: Option<f64>,
    pub cluster_id: Option<String>,
    pub patch_urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConceptsResponse {
    pub class_k: usize,
    pub name: String,
    /// Retained concepts by descending mean TCAV score.
    pub concepts: Vec<ConceptSummary>,
    pub card: ClassCard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionRequest {
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionResponse {
    pub class_subset: Vec<usize>,
    pub class_names: Vec<String>,
    /// Rows follow `class_subset`; the last column counts predictions
    /// outside the subset.
    pub counts: Vec<Vec<usize>>,
    /// Instance ids per cell by descending confidence.
    pub cell_instances: Vec<Vec<Vec<String>>>,
    pub concept_summary: ClassConceptSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavSummary {
    pub seed: u64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptResponse {
    pub record: ConceptRecord,
    pub centroid: Vec<f32>,
    pub retained: bool,
    pub cluster: Option<ConceptCluster>,
    pub patch_urls: Vec<String>,
    pub cavs: Vec<CavSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRef {
    pub segment_id: String,
    pub instance_id: String,
    pub resolution_level: ResolutionLevel,
    pub bbox: BBox,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchesResponse {
    pub concept_id: String,
    /// Ranked by distance to the concept centroid.
    pub patches: Vec<PatchRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSummary {
    pub cluster_id: String,
    pub member_concept_ids: Vec<String>,
    pub medoid_concept_id: String,
    pub classes: Vec<usize>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClustersResponse {
    pub selection: Option<ClusterSelection>,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDetail {
    pub cluster_id: String,
    pub medoid_concept_id: String,
    /// Members by descending mean TCAV score.
    pub members: Vec<ConceptSummary>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsResponse {
    pub cluster_id: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HexCellView {
    pub concept_id: String,
    pub class_k: usize,
    pub cluster_id: Option<String>,
    pub col: usize,
    pub row: usize,
    pub center: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HexLayoutResponse {
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub total_cost: f64,
    pub cells: Vec<HexCellView>,
    pub boundaries: Vec<BoundaryEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLayoutResponse {
    pub class_names: Vec<String>,
    pub class_points: Vec<ClassPoint>,
    pub cliques: Vec<Clique>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixColumn {
    pub instance_id: String,
    pub predicted_class: usize,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRow {
    pub concept_id: String,
    pub cluster_id: Option<String>,
    /// One value per column; absent where the instance was not scored.
    pub influence: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMatrixResponse {
    pub class_k: usize,
    pub order: String,
    pub columns: Vec<MatrixColumn>,
    pub rows: Vec<MatrixRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresenceOverlay {
    pub concept_id: String,
    pub present: bool,
    pub matching_segment_ids: Vec<String>,
    /// Outlines along pixel edges as `[x, y]` vertex lists; each ring closes
    /// back to its first vertex.
    pub polygons: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceResponse {
    pub instance_id: String,
    pub label: usize,
    pub split: Split,
    pub image_url: String,
    pub prediction: Option<Prediction>,
    /// Influence of each retained concept of the label class.
    pub influence: Vec<InstanceInfluenceRow>,
    pub presence: Option<Vec<PresenceOverlay>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceRequest {
    pub concept_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceResponse {
    pub instance_id: String,
    pub rows: Vec<InstanceInfluenceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunAccepted {
    pub run_id: String,
    pub status_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KScore {
    pub k: usize,
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SilhouetteResponse {
    pub method: ClusterMethod,
    pub best_k: usize,
    pub scores: Vec<KScore>,
}
