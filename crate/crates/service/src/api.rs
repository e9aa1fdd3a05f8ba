//! HTTP routes over the served snapshot.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use concept_probe::analytics::{
    accuracy_histogram, class_accuracies, class_concept_summary, concept_presence, confusion, influence_from_gradient,
    order_instances, InfluenceSample, InstanceInfluenceRow,
};
use concept_probe::clustering::{default_k_range, select_cluster_count, ClusterMethod};
use concept_probe::data::encode_png;
use concept_probe::discovery::{ConceptRecord, LayerProbe};
use concept_probe::pipeline::PipelineConfig;
use concept_probe::segmentation::{extract_segments, segment_to_patch, Mask, SlicParams};
use concept_probe::snapshot::{ConceptSpaceSnapshot, SnapshotConcept};
use concept_probe::spatial::hex_center;
use concept_probe::Error as CoreError;

use crate::payload::*;
use crate::state::{AppState, Inputs, Served};

/// Default number of patches per concept in listings.
pub const DEFAULT_PATCH_LIMIT: usize = 5;
const HISTOGRAM_BINS: usize = 10;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::NotFound(_) => StatusCode::NOT_FOUND,
            CoreError::Validation { .. } | CoreError::Parameter(_) | CoreError::Precondition(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

// Extractors whose rejections use the JSON error body.

#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Body<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
struct Query<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
struct Path<T>(T);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/snapshot", get(snapshot_info))
        .route("/api/classes", get(classes))
        .route("/api/classes/{k}/concepts", get(class_concepts))
        .route("/api/classes/{k}/instances", get(class_instances))
        .route("/api/confusion", post(confusion_matrix))
        .route("/api/concepts/{id}", get(concept))
        .route("/api/concepts/{id}/patches", get(concept_patches))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{id}", get(cluster))
        .route("/api/clusters/{id}/annotation", get(list_annotations).post(annotate))
        .route("/api/layout/hex", get(hex_layout))
        .route("/api/layout/classes", get(class_layout))
        .route("/api/instances/{id}", get(instance))
        .route("/api/instances/{id}/influence", post(instance_influence))
        .route("/api/pipeline/run", post(submit_run))
        .route("/api/pipeline/status/{run_id}", get(run_status))
        .route("/api/silhouette", get(silhouette))
        .route("/assets/patches/{file}", get(patch_asset))
        .route("/assets/images/{file}", get(image_asset))
        .fallback(|| async { ApiError::not_found("route") })
        .with_state(state)
}

pub fn patch_url(segment_id: &str) -> String {
    format!("/assets/patches/{segment_id}.png")
}

pub fn image_url(instance_id: &str) -> String {
    format!("/assets/images/{instance_id}.png")
}

fn class_name(snap: &ConceptSpaceSnapshot, k: usize) -> ApiResult<String> {
    snap.class_names.get(k).cloned().ok_or_else(|| ApiError::not_found(format!("class {k}")))
}

fn top_patch_urls(snap: &ConceptSpaceSnapshot, c: &SnapshotConcept, limit: usize) -> Vec<String> {
    c.ranked_segment_ids.iter().filter(|id| snap.patches.contains_key(*id)).take(limit).map(|id| patch_url(id)).collect()
}

fn summarize(snap: &ConceptSpaceSnapshot, c: &SnapshotConcept) -> ConceptSummary {
    let r = &c.record;
    ConceptSummary {
        concept_id: r.concept_id.clone(),
        display_name: r.display_name.clone(),
        class_k: r.class_k,
        size: r.member_segment_ids.len(),
        mean_score: r.tcav.as_ref().map(|t| t.mean_score),
        p_value: r.tcav.as_ref().map(|t| t.p_value),
        cluster_id: r.cluster_id.clone(),
        patch_urls: top_patch_urls(snap, c, DEFAULT_PATCH_LIMIT),
    }
}

fn by_score_desc(a: &ConceptSummary, b: &ConceptSummary) -> std::cmp::Ordering {
    let s = |c: &ConceptSummary| c.mean_score.unwrap_or(f64::NEG_INFINITY);
    s(b).total_cmp(&s(a)).then_with(|| a.concept_id.cmp(&b.concept_id))
}

fn records(snap: &ConceptSpaceSnapshot) -> Vec<ConceptRecord> {
    snap.concepts.iter().map(|c| c.record.clone()).collect()
}

fn inputs(served: &Served) -> ApiResult<Arc<Inputs>> {
    served.inputs().map_err(|e| ApiError::unavailable(format!("dataset or model unavailable: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn snapshot_info(State(state): State<Arc<AppState>>) -> Json<SnapshotInfo> {
    let s = &state.current().snapshot;
    Json(SnapshotInfo {
        snapshot_id: s.snapshot_id.clone(),
        created_at: s.created_at.clone(),
        config: s.config.clone(),
        class_names: s.class_names.clone(),
        embedding_dim: s.embedding_dim,
        retained_concepts: s.concepts.len(),
        discarded_concepts: s.discarded.len(),
        clusters: s.clusters.len(),
        warnings: s.warnings.clone(),
        prediction_failures: s.prediction_failures.clone(),
    })
}

async fn classes(State(state): State<Arc<AppState>>) -> ApiResult<Json<ClassesResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    let n = s.class_names.len();
    let accuracy = class_accuracies(&s.predictions, n);
    let clique_of: BTreeMap<usize, &str> = s
        .class_layout
        .cliques
        .iter()
        .flat_map(|q| q.member_classes.iter().map(move |&k| (k, q.clique_id.as_str())))
        .collect();
    let classes = s
        .class_layout
        .class_points
        .iter()
        .map(|p| ClassEntry {
            class_k: p.class_k,
            name: s.class_names[p.class_k].clone(),
            accuracy: accuracy[p.class_k],
            eval_instances: s.predictions.iter().filter(|e| e.label == p.class_k).count(),
            position: p.position,
            clique_id: clique_of.get(&p.class_k).map(|c| c.to_string()).unwrap_or_default(),
        })
        .collect();
    Ok(Json(ClassesResponse {
        snapshot_id: s.snapshot_id.clone(),
        classes,
        cliques: s.class_layout.cliques.clone(),
        histogram: accuracy_histogram(&s.predictions, n, HISTOGRAM_BINS)?,
    }))
}

async fn class_concepts(State(state): State<Arc<AppState>>, Path(k): Path<usize>) -> ApiResult<Json<ClassConceptsResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    let name = class_name(s, k)?;
    let mut concepts: Vec<ConceptSummary> = s.concepts.iter().filter(|c| c.record.class_k == k).map(|c| summarize(s, c)).collect();
    concepts.sort_by(by_score_desc);
    let card = class_concept_summary(&[k], &records(s)).cards.remove(0);
    Ok(Json(ClassConceptsResponse { class_k: k, name, concepts, card }))
}

async fn confusion_matrix(
    State(state): State<Arc<AppState>>,
    Body(req): Body<ConfusionRequest>,
) -> ApiResult<Json<ConfusionResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    let class_names = req.class_ids.iter().map(|&k| class_name(s, k)).collect::<ApiResult<Vec<_>>>()?;
    let m = confusion(&s.predictions, &req.class_ids)?;
    Ok(Json(ConfusionResponse {
        class_subset: m.class_subset,
        class_names,
        counts: m.counts,
        cell_instances: m.cell_instances,
        concept_summary: class_concept_summary(&req.class_ids, &records(s)),
    }))
}

async fn concept(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ConceptResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    let c = s.concept(&id).ok_or_else(|| ApiError::not_found(format!("concept {id}")))?;
    Ok(Json(ConceptResponse {
        record: c.record.clone(),
        centroid: c.record.centroid.clone(),
        retained: s.is_retained(&id),
        cluster: c.record.cluster_id.as_deref().and_then(|cid| s.cluster(cid)).cloned(),
        patch_urls: top_patch_urls(s, c, DEFAULT_PATCH_LIMIT),
        cavs: c.cavs.iter().map(|v| CavSummary { seed: v.seed, validation_accuracy: v.validation_accuracy }).collect(),
    }))
}

#[derive(Debug, Deserialize)]
struct LimitQuery {
    limit: Option<usize>,
}

async fn concept_patches(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<LimitQuery>,
) -> ApiResult<Json<PatchesResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    let c = s.concept(&id).ok_or_else(|| ApiError::not_found(format!("concept {id}")))?;
    let limit = q.limit.unwrap_or(DEFAULT_PATCH_LIMIT);
    let patches = c
        .ranked_segment_ids
        .iter()
        .filter(|sid| s.patches.contains_key(*sid))
        .take(limit)
        .filter_map(|sid| {
            let info = s.segments.get(sid)?;
            Some(PatchRef {
                segment_id: sid.clone(),
                instance_id: info.instance_id.clone(),
                resolution_level: info.resolution_level,
                bbox: info.bbox,
                url: patch_url(sid),
            })
        })
        .collect();
    Ok(Json(PatchesResponse { concept_id: id, patches }))
}

async fn clusters(State(state): State<Arc<AppState>>) -> Json<ClustersResponse> {
    let served = state.current();
    let s = &served.snapshot;
    let clusters = s
        .clusters
        .iter()
        .map(|c| {
            let mut classes: Vec<usize> =
                c.member_concept_ids.iter().filter_map(|id| s.concept(id)).map(|m| m.record.class_k).collect();
            classes.sort_unstable();
            classes.dedup();
            ClusterSummary {
                cluster_id: c.cluster_id.clone(),
                member_concept_ids: c.member_concept_ids.clone(),
                medoid_concept_id: c.medoid_concept_id.clone(),
                classes,
                annotations: state.annotations(&s.snapshot_id, &c.cluster_id),
            }
        })
        .collect();
    Json(ClustersResponse { selection: s.cluster_selection.clone(), clusters })
}

async fn cluster(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ClusterDetail>> {
    let served = state.current();
    let s = &served.snapshot;
    let c = s.cluster(&id).ok_or_else(|| ApiError::not_found(format!("cluster {id}")))?;
    let mut members: Vec<ConceptSummary> =
        c.member_concept_ids.iter().filter_map(|m| s.concept(m)).map(|m| summarize(s, m)).collect();
    members.sort_by(by_score_desc);
    Ok(Json(ClusterDetail {
        cluster_id: id.clone(),
        medoid_concept_id: c.medoid_concept_id.clone(),
        members,
        annotations: state.annotations(&s.snapshot_id, &id),
    }))
}

async fn list_annotations(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<AnnotationsResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    s.cluster(&id).ok_or_else(|| ApiError::not_found(format!("cluster {id}")))?;
    let annotations = state.annotations(&s.snapshot_id, &id);
    Ok(Json(AnnotationsResponse { cluster_id: id, annotations }))
}

async fn annotate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(req): Body<AnnotationRequest>,
) -> ApiResult<impl IntoResponse> {
    let served = state.current();
    let s = &served.snapshot;
    s.cluster(&id).ok_or_else(|| ApiError::not_found(format!("cluster {id}")))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("annotation text is empty"));
    }
    let snapshot_id = s.snapshot_id.clone();
    let added = blocking(move || Ok(state.annotate(&snapshot_id, &id, &req.text)?)).await?;
    Ok((StatusCode::CREATED, Json(added)))
}

async fn hex_layout(State(state): State<Arc<AppState>>) -> Json<HexLayoutResponse> {
    let served = state.current();
    let s = &served.snapshot;
    let hex = &s.concept_layout.hex;
    let cells = hex
        .cells
        .iter()
        .map(|cell| {
            let record = s.concept(&cell.concept_id).map(|c| &c.record);
            HexCellView {
                concept_id: cell.concept_id.clone(),
                class_k: record.map_or(0, |r| r.class_k),
                cluster_id: record.and_then(|r| r.cluster_id.clone()),
                col: cell.col,
                row: cell.row,
                center: hex_center(cell.col, cell.row),
            }
        })
        .collect();
    Json(HexLayoutResponse {
        grid_cols: hex.grid_cols,
        grid_rows: hex.grid_rows,
        total_cost: hex.total_cost,
        cells,
        boundaries: s.concept_layout.boundaries.clone(),
    })
}

async fn class_layout(State(state): State<Arc<AppState>>) -> Json<ClassLayoutResponse> {
    let s = &state.current().snapshot;
    Json(ClassLayoutResponse {
        class_names: s.class_names.clone(),
        class_points: s.class_layout.class_points.clone(),
        cliques: s.class_layout.cliques.clone(),
    })
}

pub const MATRIX_ORDER: &str = "influence-matrix";

#[derive(Debug, Deserialize)]
struct OrderQuery {
    order: Option<String>,
}

async fn class_instances(
    State(state): State<Arc<AppState>>,
    Path(k): Path<usize>,
    Query(q): Query<OrderQuery>,
) -> ApiResult<Json<InstanceMatrixResponse>> {
    let served = state.current();
    let s = &served.snapshot;
    class_name(s, k)?;
    let order = q.order.unwrap_or_else(|| MATRIX_ORDER.into());
    if order != MATRIX_ORDER {
        return Err(ApiError::bad_request(format!("unknown order `{order}`; expected `{MATRIX_ORDER}`")));
    }
    let own: Vec<_> = s.predictions.iter().filter(|p| p.label == k).cloned().collect();
    let columns: Vec<MatrixColumn> = order_instances(&own)
        .into_iter()
        .map(|id| {
            let p = s.prediction(&id).expect("ordered from predictions");
            MatrixColumn {
                correct: p.is_correct(),
                predicted_class: p.prediction.predicted_class,
                confidence: p.prediction.confidence,
                instance_id: id,
            }
        })
        .collect();
    let rows = s
        .concepts
        .iter()
        .filter(|c| c.record.class_k == k)
        .map(|c| {
            let m = s.influence_of(&c.record.concept_id);
            let influence = columns
                .iter()
                .map(|col| m.and_then(|m| m.instance_ids.iter().position(|i| *i == col.instance_id).and_then(|r| m.influence(r))))
                .collect();
            MatrixRow { concept_id: c.record.concept_id.clone(), cluster_id: c.record.cluster_id.clone(), influence }
        })
        .collect();
    Ok(Json(InstanceMatrixResponse { class_k: k, order, columns, rows }))
}

/// Influence row rebuilt from the s-values stored in the snapshot.
fn stored_influence(s: &ConceptSpaceSnapshot, instance_id: &str, concept_id: &str) -> Option<InstanceInfluenceRow> {
    let m = s.influence_of(concept_id)?;
    let row = m.instance_ids.iter().position(|i| i == instance_id)?;
    let samples = m.s_values[row]
        .iter()
        .enumerate()
        .map(|(i, &v)| InfluenceSample {
            instance_id: instance_id.to_string(),
            concept_id: concept_id.to_string(),
            cav_index: i,
            s_value: v as f64,
            positive: v > 0.0,
        })
        .collect();
    Some(InstanceInfluenceRow {
        instance_id: instance_id.to_string(),
        concept_id: concept_id.to_string(),
        influence: m.influence(row),
        samples,
    })
}

/// Influence rows for `concepts` on one image, computed from gradients.
fn computed_influence(
    s: &ConceptSpaceSnapshot,
    inputs: &Inputs,
    instance_id: &str,
    concepts: &[&SnapshotConcept],
) -> ApiResult<Vec<InstanceInfluenceRow>> {
    let meta = inputs.manifest.instance(instance_id).ok_or_else(|| ApiError::not_found(format!("instance {instance_id}")))?;
    let image = inputs.manifest.load_image(meta)?;
    let probe = LayerProbe::new(&inputs.model, &s.config.layer, s.config.embedding)?;
    let mut gradients: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    concepts
        .iter()
        .map(|c| {
            let k = c.record.class_k;
            if !gradients.contains_key(&k) {
                gradients.insert(k, probe.gradient(&image, k)?);
            }
            Ok(influence_from_gradient(instance_id, &c.record.concept_id, &gradients[&k], &c.cavs))
        })
        .collect()
}

fn presence_overlays(s: &ConceptSpaceSnapshot, inputs: &Inputs, instance_id: &str, concepts: &[&SnapshotConcept]) -> ApiResult<Vec<PresenceOverlay>> {
    let meta = inputs.manifest.instance(instance_id).ok_or_else(|| ApiError::not_found(format!("instance {instance_id}")))?;
    let image = inputs.manifest.load_image(meta)?;
    let config = &s.config;
    let slic = SlicParams { n_segments: 0, compactness: config.compactness, iterations: config.slic_iterations };
    let segments = extract_segments(&image, instance_id, &config.segment_resolutions, &slic, config.min_segment_pixels)?;
    let probe = LayerProbe::new(&inputs.model, &config.layer, config.embedding)?;
    let embedded = segments
        .iter()
        .map(|seg| {
            let patch = segment_to_patch(&image, seg, &s.channel_means, inputs.model.input_shape())?;
            Ok((seg.segment_id.clone(), probe.embed(&patch.pixels)?))
        })
        .collect::<concept_probe::Result<Vec<_>>>()?;
    let records: Vec<&ConceptRecord> = concepts.iter().map(|c| &c.record).collect();
    let masks: BTreeMap<&str, &Mask> = segments.iter().map(|seg| (seg.segment_id.as_str(), &seg.mask)).collect();
    Ok(concept_presence(instance_id, &embedded, &records)
        .into_iter()
        .map(|p| {
            let polygons = union(p.matching_segment_ids.iter().map(|id| masks[id.as_str()]))
                .map(|m| m.outline().into_iter().map(|ring| ring.into_iter().map(|(x, y)| [x, y]).collect()).collect())
                .unwrap_or_default();
            PresenceOverlay { concept_id: p.concept_id, present: p.present, matching_segment_ids: p.matching_segment_ids, polygons }
        })
        .collect())
}

fn union<'a>(mut masks: impl Iterator<Item = &'a Mask>) -> Option<Mask> {
    let first = masks.next()?;
    let mut bits = first.bits().to_vec();
    for m in masks {
        bits.iter_mut().zip(m.bits()).for_each(|(b, &o)| *b |= o);
    }
    Mask::new(first.height, first.width, bits).ok()
}

async fn instance(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<InstanceResponse>> {
    let served = state.current();
    blocking(move || {
        let s = &served.snapshot;
        let mut warnings = Vec::new();
        let inputs = match served.inputs() {
            Ok(i) => Some(i),
            Err(e) => {
                warnings.push(format!("dataset or model unavailable: {e}"));
                None
            }
        };
        let stored = s.prediction(&id);
        let (label, split) = match (&inputs, stored) {
            (Some(i), _) => {
                let meta = i.manifest.instance(&id).ok_or_else(|| ApiError::not_found(format!("instance {id}")))?;
                (meta.label, meta.split)
            }
            (None, Some(p)) => (p.label, concept_probe::data::Split::Eval),
            (None, None) => return Err(ApiError::not_found(format!("instance {id}"))),
        };
        let prediction = match (stored, &inputs) {
            (Some(p), _) => Some(p.prediction.clone()),
            (None, Some(i)) => {
                let meta = i.manifest.instance(&id).expect("checked above");
                let mut p = i.model.predict(&i.manifest.load_image(meta)?)?;
                p.instance_id = id.clone();
                Some(p)
            }
            (None, None) => None,
        };
        let own: Vec<&SnapshotConcept> = s.concepts.iter().filter(|c| c.record.class_k == label).collect();
        let stored_rows: Option<Vec<_>> = own.iter().map(|c| stored_influence(s, &id, &c.record.concept_id)).collect();
        let influence = match (stored_rows, &inputs) {
            (Some(rows), _) => rows,
            (None, Some(i)) => computed_influence(s, i, &id, &own)?,
            (None, None) => Vec::new(),
        };
        let presence = inputs.as_ref().map(|i| presence_overlays(s, i, &id, &own)).transpose()?;
        Ok(Json(InstanceResponse { image_url: image_url(&id), instance_id: id, label, split, prediction, influence, presence, warnings }))
    })
    .await
}

async fn instance_influence(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(req): Body<InfluenceRequest>,
) -> ApiResult<Json<InfluenceResponse>> {
    let served = state.current();
    blocking(move || {
        let s = &served.snapshot;
        let concepts = req
            .concept_ids
            .iter()
            .map(|cid| s.concept(cid).ok_or_else(|| ApiError::not_found(format!("concept {cid}"))))
            .collect::<ApiResult<Vec<_>>>()?;
        let inputs = inputs(&served)?;
        let rows = computed_influence(s, &inputs, &id, &concepts)?;
        Ok(Json(InfluenceResponse { instance_id: id, rows }))
    })
    .await
}

async fn submit_run(
    State(state): State<Arc<AppState>>,
    Body(config): Body<PipelineConfig>,
) -> ApiResult<impl IntoResponse> {
    config.validate()?;
    let run_id = state.submit(config);
    let status_url = format!("/api/pipeline/status/{run_id}");
    Ok((StatusCode::ACCEPTED, Json(RunAccepted { run_id, status_url })))
}

async fn run_status(
    State(state): State<Arc<AppState>>,
    Path(run_id): Path<String>,
) -> ApiResult<Json<concept_probe::pipeline::RunStatus>> {
    state.status(&run_id).map(Json).ok_or_else(|| ApiError::not_found(format!("run {run_id}")))
}

#[derive(Debug, Deserialize)]
struct SilhouetteQuery {
    method: Option<ClusterMethod>,
    from: Option<usize>,
    to: Option<usize>,
}

async fn silhouette(State(state): State<Arc<AppState>>, Query(q): Query<SilhouetteQuery>) -> ApiResult<Json<SilhouetteResponse>> {
    let served = state.current();
    blocking(move || {
        let s = &served.snapshot;
        let vectors: Vec<Vec<f64>> =
            s.concepts.iter().map(|c| c.record.centroid.iter().map(|&v| v as f64).collect()).collect();
        let method = q.method.unwrap_or(s.config.clustering.method);
        let range = default_k_range(vectors.len());
        let (from, to) = (q.from.unwrap_or(*range.start()), q.to.unwrap_or(*range.end()));
        let (best_k, scores) = select_cluster_count(&vectors, method, from..=to, s.config.clustering.seed)?;
        let scores = scores.into_iter().map(|(k, silhouette)| KScore { k, silhouette }).collect();
        Ok(Json(SilhouetteResponse { method, best_k, scores }))
    })
    .await
}

fn png_name(file: &str) -> ApiResult<&str> {
    file.strip_suffix(".png").ok_or_else(|| ApiError::not_found(file))
}

async fn patch_asset(State(state): State<Arc<AppState>>, Path(file): Path<String>) -> ApiResult<Response> {
    let served = state.current();
    let id = png_name(&file)?;
    let bytes = served.snapshot.patches.get(id).ok_or_else(|| ApiError::not_found(format!("patch {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes.clone()).into_response())
}

async fn image_asset(State(state): State<Arc<AppState>>, Path(file): Path<String>) -> ApiResult<Response> {
    let served = state.current();
    let id = png_name(&file)?.to_string();
    let bytes = blocking(move || {
        let inputs = inputs(&served)?;
        let meta = inputs.manifest.instance(&id).ok_or_else(|| ApiError::not_found(format!("instance {id}")))?;
        Ok(encode_png(&inputs.manifest.load_image(meta)?)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
