mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use serde_json::json;

use common::*;
use concept_probe::analytics::{order_instances, InstanceInfluenceRow};
use concept_probe::data::{decode_png, Split};
use concept_probe::discovery::ConceptRecord;
use concept_probe::pipeline::{PipelineConfig, RunStatus, Stage, PATCHES_PER_CONCEPT};
use concept_probe::snapshot::{load_snapshot, Annotation};
use concept_probe_service::api::DEFAULT_PATCH_LIMIT;
use concept_probe_service::payload::*;
use concept_probe_service::{bind, router, AppState};

fn snapshot() -> concept_probe::snapshot::ConceptSpaceSnapshot {
    load_snapshot(&setup().snapshot_dir).unwrap()
}

#[tokio::test]
async fn classes_and_class_layout() {
    let app = shared_app();
    let snap = snapshot();
    let r: ClassesResponse = get_ok(&app, "/api/classes").await;
    assert_eq!(r.snapshot_id, snap.snapshot_id);
    assert_eq!(r.classes.len(), 3);
    assert_eq!(r.classes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["striped", "spotted", "plain"]);
    for c in &r.classes {
        assert_eq!(c.eval_instances, 30);
        assert_eq!(r.histogram.class_accuracy[c.class_k], c.accuracy);
        assert!(r.cliques.iter().any(|q| q.clique_id == c.clique_id && q.member_classes.contains(&c.class_k)));
    }
    assert_eq!(r.histogram.counts.iter().sum::<usize>(), 3);

    let layout: ClassLayoutResponse = get_ok(&app, "/api/layout/classes").await;
    assert_eq!(layout.class_points, snap.class_layout.class_points);
    assert_eq!(layout.cliques, r.cliques);
}

#[tokio::test]
async fn class_concepts_sorted_by_score_with_card() {
    let app = shared_app();
    let snap = snapshot();
    for k in 0..3 {
        let r: ClassConceptsResponse = get_ok(&app, &format!("/api/classes/{k}/concepts")).await;
        assert_eq!(r.class_k, k);
        let expected = snap.concepts.iter().filter(|c| c.record.class_k == k).count();
        assert_eq!(r.concepts.len(), expected);
        assert!(r.concepts.windows(2).all(|w| w[0].mean_score >= w[1].mean_score));
        assert!(r.concepts.iter().all(|c| c.patch_urls.len() <= DEFAULT_PATCH_LIMIT && !c.patch_urls.is_empty()));
        assert_eq!(r.card.class_k, k);
        assert_eq!(r.card.histogram.iter().sum::<usize>(), expected);
    }
    assert_eq!(get(&app, "/api/classes/3/concepts").await.status, StatusCode::NOT_FOUND);
    let bad = get(&app, "/api/classes/abc/concepts").await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    bad.json::<ErrorBody>();
}

#[tokio::test]
async fn confusion_for_selected_classes() {
    let app = shared_app();
    let r = post(&app, "/api/confusion", json!({"class_ids": [2, 0]})).await;
    assert_eq!(r.status, StatusCode::OK);
    let m: ConfusionResponse = r.json();
    assert_eq!(m.class_subset, [2, 0]);
    assert_eq!(m.class_names, ["plain", "striped"]);
    assert_eq!(m.counts.len(), 2);
    assert!(m.counts.iter().all(|row| row.len() == 3 && row.iter().sum::<usize>() == 30));
    for (r, row) in m.cell_instances.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            assert_eq!(cell.len(), m.counts[r][c]);
        }
    }
    assert!(m.concept_summary.cards.iter().map(|c| c.class_k).eq([2, 0]));

    assert_eq!(post(&app, "/api/confusion", json!({"class_ids": []})).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/confusion", json!({"class_ids": [9]})).await.status, StatusCode::NOT_FOUND);
    assert_eq!(post(&app, "/api/confusion", json!({"classes": [0]})).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concept_detail_and_patches() {
    let app = shared_app();
    let snap = snapshot();
    let c = &snap.concepts[0];
    let id = &c.record.concept_id;
    let r: ConceptResponse = get_ok(&app, &format!("/api/concepts/{id}")).await;
    assert_eq!(r.centroid, c.record.centroid);
    assert_eq!(ConceptRecord { centroid: r.centroid.clone(), ..r.record.clone() }, c.record);
    assert!(r.retained);
    assert_eq!(r.cluster.unwrap().cluster_id, c.record.cluster_id.clone().unwrap());
    assert_eq!(r.cavs.len(), c.cavs.len());
    assert_eq!(r.patch_urls.len(), DEFAULT_PATCH_LIMIT.min(c.ranked_segment_ids.len()));

    let default: PatchesResponse = get_ok(&app, &format!("/api/concepts/{id}/patches")).await;
    let urls: Vec<&str> = default.patches.iter().map(|p| p.url.as_str()).collect();
    assert_eq!(urls, r.patch_urls);
    let all: PatchesResponse = get_ok(&app, &format!("/api/concepts/{id}/patches?limit=1000")).await;
    assert_eq!(all.patches.len(), PATCHES_PER_CONCEPT.min(c.ranked_segment_ids.len()));
    let ids: Vec<&String> = all.patches.iter().map(|p| &p.segment_id).collect();
    assert!(ids.iter().copied().eq(c.ranked_segment_ids.iter().take(ids.len())));
    let two: PatchesResponse = get_ok(&app, &format!("/api/concepts/{id}/patches?limit=2")).await;
    assert_eq!(two.patches[..], all.patches[..2]);

    if let Some(d) = snap.discarded.first() {
        let r: ConceptResponse = get_ok(&app, &format!("/api/concepts/{}", d.record.concept_id)).await;
        assert!(!r.retained);
        assert!(r.cluster.is_none());
    }
    let missing = get(&app, "/api/concepts/nope").await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    assert!(missing.json::<ErrorBody>().error.contains("nope"));
    assert_eq!(get(&app, &format!("/api/concepts/{id}/patches?limit=x")).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn clusters_and_hex_layout_agree() {
    let app = shared_app();
    let snap = snapshot();
    let list: ClustersResponse = get_ok(&app, "/api/clusters").await;
    assert_eq!(list.selection, snap.cluster_selection);
    assert_eq!(list.clusters.len(), snap.clusters.len());
    for c in &list.clusters {
        let d: ClusterDetail = get_ok(&app, &format!("/api/clusters/{}", c.cluster_id)).await;
        assert_eq!(d.members.len(), c.member_concept_ids.len());
        assert!(d.members.windows(2).all(|w| w[0].mean_score >= w[1].mean_score));
        assert!(d.members.iter().all(|m| m.cluster_id.as_deref() == Some(c.cluster_id.as_str())));
    }
    assert_eq!(get(&app, "/api/clusters/CC99").await.status, StatusCode::NOT_FOUND);

    let hex: HexLayoutResponse = get_ok(&app, "/api/layout/hex").await;
    assert_eq!(hex.cells.len(), snap.concepts.len());
    for cell in &hex.cells {
        let c = snap.concept(&cell.concept_id).unwrap();
        assert_eq!(cell.cluster_id, c.record.cluster_id);
        assert!(cell.col < hex.grid_cols && cell.row < hex.grid_rows);
    }
    let mut slots: Vec<(usize, usize)> = hex.cells.iter().map(|c| (c.col, c.row)).collect();
    slots.sort();
    slots.dedup();
    assert_eq!(slots.len(), hex.cells.len());
}

#[tokio::test]
async fn instance_matrix_follows_confidence_order() {
    let app = shared_app();
    let snap = snapshot();
    for k in 0..3 {
        let m: InstanceMatrixResponse = get_ok(&app, &format!("/api/classes/{k}/instances?order=influence-matrix")).await;
        let own: Vec<_> = snap.predictions.iter().filter(|p| p.label == k).cloned().collect();
        let ids: Vec<String> = m.columns.iter().map(|c| c.instance_id.clone()).collect();
        assert_eq!(ids, order_instances(&own));
        let split = m.columns.iter().position(|c| !c.correct).unwrap_or(m.columns.len());
        assert!(m.columns[split..].iter().all(|c| !c.correct));
        assert!(m.columns[..split].windows(2).all(|w| w[0].confidence >= w[1].confidence));
        assert!(m.columns[split..].windows(2).all(|w| w[0].confidence <= w[1].confidence));
        for row in &m.rows {
            assert_eq!(row.influence.len(), m.columns.len());
            assert!(row.influence.iter().all(|v| v.is_some_and(|v| (0.0..=1.0).contains(&v))));
        }
    }
    assert_eq!(get(&app, "/api/classes/0/instances?order=alphabetical").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn instance_detail_matches_on_demand_influence() {
    let app = shared_app();
    let snap = snapshot();
    let eval = &snap.predictions[0];
    let id = eval.id();
    let r: InstanceResponse = get_ok(&app, &format!("/api/instances/{id}")).await;
    assert_eq!(r.prediction.as_ref(), Some(&eval.prediction));
    assert_eq!(r.split, Split::Eval);
    assert!(r.warnings.is_empty());
    let own: Vec<&str> =
        snap.concepts.iter().filter(|c| c.record.class_k == eval.label).map(|c| c.record.concept_id.as_str()).collect();
    assert_eq!(r.influence.iter().map(|row| row.concept_id.as_str()).collect::<Vec<_>>(), own);
    let presence = r.presence.unwrap();
    assert_eq!(presence.len(), own.len());
    for p in &presence {
        assert_eq!(p.present, !p.polygons.is_empty());
        for ring in &p.polygons {
            assert!(ring.len() >= 4);
            assert!(ring.iter().all(|[x, y]| (0.0..=32.0).contains(x) && (0.0..=32.0).contains(y)));
        }
    }

    let all_ids: Vec<&str> = snap.concepts.iter().map(|c| c.record.concept_id.as_str()).collect();
    let on_demand = post(&app, &format!("/api/instances/{id}/influence"), json!({"concept_ids": all_ids})).await;
    assert_eq!(on_demand.status, StatusCode::OK);
    let on_demand: InfluenceResponse = on_demand.json();
    assert_eq!(on_demand.rows.len(), all_ids.len());
    for stored in &r.influence {
        let fresh: &InstanceInfluenceRow = on_demand.rows.iter().find(|row| row.concept_id == stored.concept_id).unwrap();
        assert_eq!(fresh.samples.len(), stored.samples.len());
        for (a, b) in fresh.samples.iter().zip(&stored.samples) {
            assert!((a.s_value - b.s_value).abs() <= 1e-5 * (1.0 + a.s_value.abs()), "{} vs {}", a.s_value, b.s_value);
        }
    }

    let probe_id = "striped-probe-00";
    let p: InstanceResponse = get_ok(&app, &format!("/api/instances/{probe_id}")).await;
    assert_eq!(p.split, Split::Probe);
    assert!(p.prediction.is_some());
    assert!(p.influence.iter().all(|row| row.influence.is_some()));

    assert_eq!(get(&app, "/api/instances/nope").await.status, StatusCode::NOT_FOUND);
    let unknown = post(&app, &format!("/api/instances/{id}/influence"), json!({"concept_ids": ["nope"]})).await;
    assert_eq!(unknown.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn silhouette_scores_over_requested_range() {
    let app = shared_app();
    let snap = snapshot();
    let n = snap.concepts.len();
    assert!(n >= 4, "fixture run retained {n} concepts");
    let r: SilhouetteResponse = get_ok(&app, &format!("/api/silhouette?method=agglomerative&from=2&to={}", n - 1)).await;
    assert_eq!(r.scores.iter().map(|s| s.k).collect::<Vec<_>>(), (2..n).collect::<Vec<_>>());
    assert!(r.scores.iter().all(|s| (-1.0..=1.0).contains(&s.silhouette)));
    let best = r.scores.iter().max_by(|a, b| a.silhouette.total_cmp(&b.silhouette)).unwrap();
    assert_eq!(r.scores.iter().find(|s| s.k == r.best_k).unwrap().silhouette, best.silhouette);
    let default: SilhouetteResponse = get_ok(&app, "/api/silhouette").await;
    if let Some(sel) = &snap.cluster_selection {
        if sel.automatic {
            assert_eq!(default.best_k, sel.k);
        }
    }
    assert_eq!(get(&app, &format!("/api/silhouette?from=1&to={n}")).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/silhouette?method=spectral").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn assets_are_png() {
    let app = shared_app();
    let snap = snapshot();
    let (id, bytes) = snap.patches.iter().next().unwrap();
    let r = get(&app, &format!("/assets/patches/{id}.png")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    assert_eq!(&r.body, bytes);
    assert_eq!(get(&app, &format!("/assets/patches/{id}")).await.status, StatusCode::NOT_FOUND);

    let r = get(&app, "/assets/images/spotted-eval-03.png").await;
    assert_eq!(r.status, StatusCode::OK);
    let fx = &setup().fixture;
    let inst = fx.manifest.instance("spotted-eval-03").unwrap();
    assert_eq!(decode_png(&r.body, [32, 32, 3]).unwrap(), fx.manifest.load_image(inst).unwrap());
    assert_eq!(get(&app, "/assets/images/nope.png").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/nowhere").await.json::<ErrorBody>().error, "route not found");
}

#[tokio::test]
async fn annotations_persist_in_order_across_restart() {
    let (_root, dir, state) = private_service();
    let app = router(state);
    let cluster = snapshot().clusters[0].cluster_id.clone();
    let url = format!("/api/clusters/{cluster}/annotation");
    for text in ["white fur", "snowy background"] {
        let r = post(&app, &url, json!({ "text": text })).await;
        assert_eq!(r.status, StatusCode::CREATED);
        assert_eq!(r.json::<Annotation>().text, text);
    }
    assert_eq!(post(&app, &url, json!({"text": "  "})).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/clusters/CC99/annotation", json!({"text": "x"})).await.status, StatusCode::NOT_FOUND);

    let restarted = router(AppState::open(&dir).unwrap());
    let listed: AnnotationsResponse = get_ok(&restarted, &url).await;
    let texts: Vec<&str> = listed.annotations.iter().map(|a| a.text.as_str()).collect();
    assert_eq!(texts, ["white fur", "snowy background"]);
    let detail: ClusterDetail = get_ok(&restarted, &format!("/api/clusters/{cluster}")).await;
    assert_eq!(detail.annotations, listed.annotations);
    // The snapshot itself is untouched.
    assert_eq!(load_snapshot(&dir).unwrap(), snapshot());
}

async fn wait_for(app: &axum::Router, run_id: &str) -> RunStatus {
    let start = Instant::now();
    loop {
        let s: RunStatus = get_ok(app, &format!("/api/pipeline/status/{run_id}")).await;
        if matches!(s.stage, Stage::Done | Stage::Failed) {
            return s;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "run stuck at {}", s.stage);
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test]
async fn rerun_swaps_the_served_snapshot() {
    let (_root, dir, state) = private_service();
    let app = router(state);
    let old = snapshot();
    let config = PipelineConfig { alpha: 0.05, ..setup().config.clone() };

    let r = post(&app, "/api/pipeline/run", serde_json::to_value(&config).unwrap()).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let accepted: RunAccepted = r.json();
    let missing = PipelineConfig { dataset_path: dir.join("absent.json"), ..config.clone() };
    let second: RunAccepted = post(&app, "/api/pipeline/run", serde_json::to_value(&missing).unwrap()).await.json();
    assert_ne!(second.run_id, accepted.run_id);

    let done = wait_for(&app, &accepted.run_id).await;
    assert_eq!(done.stage, Stage::Done, "{:?}", done.error);
    assert_eq!(done.progress, 1.0);
    let new_id = done.snapshot_id.unwrap();
    assert_ne!(new_id, old.snapshot_id);
    let info: SnapshotInfo = get_ok(&app, "/api/snapshot").await;
    assert_eq!(info.snapshot_id, new_id);
    assert_eq!(info.config.alpha, 0.05);
    let hex: HexLayoutResponse = get_ok(&app, "/api/layout/hex").await;
    for cell in &hex.cells {
        get_ok::<ConceptResponse>(&app, &format!("/api/concepts/{}", cell.concept_id)).await;
    }

    let failed = wait_for(&app, &second.run_id).await;
    assert_eq!(failed.stage, Stage::Failed);
    assert_eq!(failed.failed_stage, Some(Stage::Queued));
    assert!(failed.error.unwrap().contains("absent.json"));
    let info: SnapshotInfo = get_ok(&app, "/api/snapshot").await;
    assert_eq!(info.snapshot_id, new_id);
    assert_eq!(load_snapshot(&dir).unwrap(), old);

    let invalid = PipelineConfig { n_cavs: 1, ..config };
    let r = post(&app, "/api/pipeline/run", serde_json::to_value(&invalid).unwrap()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.json::<ErrorBody>().error.contains("n_cavs"));
    assert_eq!(get(&app, "/api/pipeline/status/run-99").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn busy_port_is_a_startup_error() {
    let first = bind("127.0.0.1:0").await.unwrap();
    let addr = first.local_addr().unwrap().to_string();
    let err = bind(&addr).await.unwrap_err();
    assert!(format!("{err:#}").contains(&addr));
}
