//! Shared service state: the served snapshot, annotations and the run queue.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock, RwLock, Weak};
use std::thread;

use concept_probe::data::DatasetManifest;
use concept_probe::model::ModelGraph;
use concept_probe::pipeline::{load_inputs, run_pipeline, PipelineConfig, RunObserver, RunStatus, Stage};
use concept_probe::snapshot::{load_snapshot, AnnotationStore, ConceptSpaceSnapshot};

/// Dataset and model a snapshot was computed from.
pub struct Inputs {
    pub manifest: DatasetManifest,
    pub model: ModelGraph,
}

/// A loaded snapshot. Never mutated once built; a re-run replaces the whole
/// value.
pub struct Served {
    pub snapshot: ConceptSpaceSnapshot,
    pub dir: PathBuf,
    inputs: OnceLock<Result<Arc<Inputs>, String>>,
}

impl Served {
    pub fn new(snapshot: ConceptSpaceSnapshot, dir: impl Into<PathBuf>) -> Self {
        Served { snapshot, dir: dir.into(), inputs: OnceLock::new() }
    }

    /// Loads the snapshot's dataset and model on first use.
    pub fn inputs(&self) -> Result<Arc<Inputs>, String> {
        self.inputs
            .get_or_init(|| {
                load_inputs(&self.snapshot.config)
                    .map(|(manifest, model)| Arc::new(Inputs { manifest, model }))
                    .map_err(|e| e.to_string())
            })
            .clone()
    }
}

pub struct AppState {
    served: RwLock<Arc<Served>>,
    /// Directory holding snapshots, `annotations.json` and new runs.
    root: PathBuf,
    annotations: Mutex<AnnotationStore>,
    runs: Mutex<HashMap<String, RunStatus>>,
    next_run: AtomicU64,
    queue: Mutex<mpsc::Sender<(String, PipelineConfig)>>,
}

impl AppState {
    /// Serves `dir`. Annotations and re-run outputs live in its parent.
    pub fn open(dir: impl AsRef<Path>) -> anyhow::Result<Arc<Self>> {
        let dir = dir.as_ref().to_path_buf();
        let snapshot = load_snapshot(&dir)?;
        Self::new(Served::new(snapshot, &dir))
    }

    pub fn new(served: Served) -> anyhow::Result<Arc<Self>> {
        let root = served.dir.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let annotations = AnnotationStore::load(&root)?;
        let (tx, rx) = mpsc::channel();
        let state = Arc::new(AppState {
            served: RwLock::new(Arc::new(served)),
            root,
            annotations: Mutex::new(annotations),
            runs: Mutex::new(HashMap::new()),
            next_run: AtomicU64::new(1),
            queue: Mutex::new(tx),
        });
        let weak = Arc::downgrade(&state);
        thread::Builder::new().name("pipeline-runner".into()).spawn(move || worker(weak, rx))?;
        Ok(state)
    }

    pub fn current(&self) -> Arc<Served> {
        self.served.read().expect("served lock").clone()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn swap(&self, served: Served) {
        *self.served.write().expect("served lock") = Arc::new(served);
    }

    /// Appends and persists an annotation. Writes are serialized.
    pub fn annotate(
        &self,
        snapshot_id: &str,
        cluster_id: &str,
        text: &str,
    ) -> concept_probe::Result<concept_probe::snapshot::Annotation> {
        let mut store = self.annotations.lock().expect("annotation lock");
        let mut updated = store.clone();
        let added = updated.append(snapshot_id, cluster_id, text);
        updated.save(&self.root)?;
        *store = updated;
        Ok(added)
    }

    pub fn annotations(&self, snapshot_id: &str, cluster_id: &str) -> Vec<concept_probe::snapshot::Annotation> {
        self.annotations.lock().expect("annotation lock").get(snapshot_id, cluster_id).to_vec()
    }

    /// Queues a validated config and returns its run id.
    pub fn submit(&self, config: PipelineConfig) -> String {
        let run_id = format!("run-{}", self.next_run.fetch_add(1, Ordering::Relaxed));
        self.runs.lock().expect("runs lock").insert(run_id.clone(), RunStatus::new(&run_id));
        // The worker outlives every sender, so this only fails during shutdown.
        let _ = self.queue.lock().expect("queue lock").send((run_id.clone(), config));
        run_id
    }

    pub fn status(&self, run_id: &str) -> Option<RunStatus> {
        self.runs.lock().expect("runs lock").get(run_id).cloned()
    }

    fn update(&self, run_id: &str, f: impl FnOnce(&mut RunStatus)) {
        if let Some(s) = self.runs.lock().expect("runs lock").get_mut(run_id) {
            f(s);
        }
    }
}

struct StatusObserver<'a> {
    state: &'a AppState,
    run_id: &'a str,
}

impl RunObserver for StatusObserver<'_> {
    fn stage(&self, stage: Stage) {
        // Done is reported only after the new snapshot is being served.
        if stage != Stage::Done {
            self.state.update(self.run_id, |s| {
                let _ = s.advance(stage);
            });
        }
    }

    fn warning(&self, message: &str) {
        self.state.update(self.run_id, |s| s.warnings.push(message.to_string()));
    }
}

fn worker(state: Weak<AppState>, rx: mpsc::Receiver<(String, PipelineConfig)>) {
    while let Ok((run_id, config)) = rx.recv() {
        let Some(state) = state.upgrade() else { return };
        let observer = StatusObserver { state: &state, run_id: &run_id };
        match run_pipeline(&config, &state.root, &observer) {
            Ok(out) => {
                let id = out.snapshot.snapshot_id.clone();
                state.swap(Served::new(out.snapshot, out.path));
                state.update(&run_id, |s| {
                    s.snapshot_id = Some(id);
                    let _ = s.advance(Stage::Done);
                });
            }
            Err(e) => state.update(&run_id, |s| s.fail(&e)),
        }
    }
}
