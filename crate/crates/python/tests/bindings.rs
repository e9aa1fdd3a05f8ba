use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

use concept_probe_py::{concept_probe_module, read_config, write_fixture, FIXTURE_CONFIG};

fn run_python(script: &str, dir: &std::path::Path) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(concept_probe_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("cp", module).unwrap();
        globals.set_item("workdir", dir.to_str().unwrap()).unwrap();
        let code = CString::new(script).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python script failed: {e}");
        }
    });
}

#[test]
fn numeric_functions() {
    let dir = tempfile::tempdir().unwrap();
    run_python(
        r#"
assert cp.hungarian([[4.0, 1.0], [2.0, 0.0]]) in ([1, 0], [0, 1])
assert cp.hungarian([[5.0, 1.0, 9.0]]) == [1]
t, df, p = cp.one_sample_t_test([0.5] * 5, 0.5)
assert (t, df, p) == (0.0, 4.0, 1.0)
s = cp.silhouette_score([[0.0], [0.1], [5.0], [5.1]], [0, 0, 1, 1])
assert 0.9 < s <= 1.0
n, labels = cp.slic([0.0] * (16 * 16 * 3), [16, 16, 3], 4)
assert len(labels) == 256 and set(labels) == set(range(n))
try:
    cp.hungarian([[1.0], [2.0]])
    raise AssertionError("more rows than columns accepted")
except ValueError:
    pass
"#,
        dir.path(),
    );
}

#[test]
fn fixture_pipeline_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_fixture(dir.path(), 1).unwrap();
    assert_eq!(cfg, dir.path().join(FIXTURE_CONFIG));
    let config = read_config(&cfg).unwrap();
    assert!(config.dataset_path.is_absolute() && config.dataset_path.exists());
    run_python(
        r#"
import json, os
cfg = json.load(open(os.path.join(workdir, "cfg.json")))
for key in ("dataset_path", "model_path"):
    cfg[key] = os.path.join(workdir, cfg[key])
cfg.update(images_per_class=6, segment_resolutions=[15], concepts_per_class=3, min_concept_size=4, n_cavs=4)
snap = cp.run_pipeline(cfg, os.path.join(workdir, "out"), seed=3)
again = cp.Snapshot.load(snap.path)
assert again.snapshot_id == snap.snapshot_id
assert snap.class_names == ["striped", "spotted", "plain"]
concepts = snap.concepts(include_discarded=True)
assert concepts and all(c["class_k"] in (0, 1, 2) for c in concepts)
assert all(c["class_k"] == 1 for c in snap.concepts(1))
doc = json.loads(snap.to_json())
assert doc["snapshot_id"] == snap.snapshot_id == snap.to_dict()["snapshot_id"]
assert len(snap.predictions()) > 0

model = cp.Model.load(cfg["model_path"])
h, w, c = model.input_shape
pred = model.predict([0.5] * (h * w * c))
assert abs(sum(pred["probabilities"]) - 1.0) < 1e-9
shape, values = model.activation([0.5] * (h * w * c), "pool1")
assert len(values) == shape[0] * shape[1] * shape[2]
try:
    cp.run_pipeline(dict(cfg, n_cavs=1), os.path.join(workdir, "out"))
    raise AssertionError("invalid config accepted")
except ValueError:
    pass
"#,
        dir.path(),
    );
}
