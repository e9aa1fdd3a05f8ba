#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use tower::ServiceExt;

use concept_probe::fixture::planted::{build_planted_fixture, PlantedFixture, PROBE_LAYER};
use concept_probe::pipeline::{run_pipeline, PipelineConfig};
use concept_probe_service::{router, AppState};

pub struct Setup {
    _dir: tempfile::TempDir,
    pub fixture: PlantedFixture,
    pub snapshot_dir: PathBuf,
    pub config: PipelineConfig,
}

/// A reduced pipeline run over the planted fixture.
pub fn small_config(fx: &PlantedFixture, seed: u64) -> PipelineConfig {
    PipelineConfig {
        dataset_path: fx.manifest_path(),
        model_path: fx.model_path(),
        layer: PROBE_LAYER.into(),
        images_per_class: 8,
        segment_resolutions: vec![15],
        concepts_per_class: 4,
        min_concept_size: 5,
        n_cavs: 6,
        seed,
        ..PipelineConfig::default()
    }
}

pub fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let fixture = build_planted_fixture(dir.path().join("fixture"), 5).unwrap();
        let config = small_config(&fixture, 7);
        let out = run_pipeline(&config, dir.path().join("snapshots"), &()).unwrap();
        Setup { _dir: dir, fixture, snapshot_dir: out.path, config }
    })
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A service over a private copy of the shared snapshot, so that
/// annotations and runs do not leak between tests.
pub fn private_service() -> (tempfile::TempDir, PathBuf, Arc<AppState>) {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join(setup().snapshot_dir.file_name().unwrap());
    copy_dir(&setup().snapshot_dir, &dir);
    let state = AppState::open(&dir).unwrap();
    (root, dir, state)
}

pub fn shared_app() -> Router {
    static STATE: OnceLock<(tempfile::TempDir, Arc<AppState>)> = OnceLock::new();
    let (_, state) = STATE.get_or_init(|| {
        let (root, _, state) = private_service();
        (root, state)
    });
    router(state.clone())
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("schema mismatch: {e}\n{}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<serde_json::Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let content_type = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, body }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: serde_json::Value) -> Reply {
    call(app, Method::POST, uri, Some(body)).await
}

/// GET that must succeed, parsed into `T`.
pub async fn get_ok<T: DeserializeOwned>(app: &Router, uri: &str) -> T {
    let r = get(app, uri).await;
    assert_eq!(r.status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&r.body));
    r.json()
}
