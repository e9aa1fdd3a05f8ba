//! Python bindings: build the planted fixture, run the pipeline, read
//! snapshots and call the numeric building blocks directly.
//!
//! Structured results cross the boundary as JSON and arrive in Python as
//! plain dicts and lists.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};

use concept_probe::fixture::planted::{build_planted_fixture, PROBE_LAYER};
use concept_probe::model::{load_model, ModelGraph};
use concept_probe::pipeline::{run_pipeline as run, PipelineConfig};
use concept_probe::segmentation::{slic as slic_segment, SlicParams};
use concept_probe::snapshot::{export_json, load_snapshot, ConceptSpaceSnapshot};
use concept_probe::{Error, Tensor};

/// Name of the config written next to a generated fixture.
pub const FIXTURE_CONFIG: &str = "cfg.json";

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Validation { .. } | Error::Parameter(_) | Error::Shape(_) | Error::UnknownLayer(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// Writes the planted fixture into `out` with a default config; returns the
/// config path.
pub fn write_fixture(out: &Path, seed: u64) -> concept_probe::Result<PathBuf> {
    let fx = build_planted_fixture(out, seed)?;
    let config = PipelineConfig {
        dataset_path: "dataset.json".into(),
        model_path: fx.model_path().strip_prefix(&fx.dir).unwrap_or(&fx.model_path()).to_path_buf(),
        layer: PROBE_LAYER.into(),
        ..PipelineConfig::default()
    };
    let path = out.join(FIXTURE_CONFIG);
    std::fs::write(&path, serde_json::to_vec_pretty(&config)?).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Reads a config file, resolving relative paths against its directory.
pub fn read_config(path: &Path) -> concept_probe::Result<PipelineConfig> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut config: PipelineConfig = serde_json::from_slice(&bytes)?;
    let base = path.canonicalize().map_err(|e| io_err(path, e))?.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve_paths(&base);
    Ok(config)
}

fn config_from_py(config: &Bound<'_, PyAny>) -> PyResult<PipelineConfig> {
    if config.is_instance_of::<PyDict>() {
        let text: String = config.py().import("json")?.call_method1("dumps", (config,))?.extract()?;
        return serde_json::from_str(&text).map_err(value_err);
    }
    let path: PathBuf = config.extract()?;
    read_config(&path).map_err(core_err)
}

fn image_tensor(pixels: Vec<f64>, shape: [usize; 3]) -> PyResult<Tensor> {
    Tensor::from_f64(shape.to_vec(), &pixels).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (out, seed = 0))]
fn build_fixture(out: PathBuf, seed: u64) -> PyResult<PathBuf> {
    write_fixture(&out, seed).map_err(core_err)
}

/// Runs the pipeline from a config dict or config file path and saves the
/// snapshot under `out`.
#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn run_pipeline(py: Python<'_>, config: &Bound<'_, PyAny>, out: PathBuf, seed: Option<u64>) -> PyResult<Snapshot> {
    let mut config = config_from_py(config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(core_err)?;
    let result = py.detach(|| run(&config, &out, &()));
    let output = result.map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(Snapshot { inner: output.snapshot, path: output.path })
}

#[pyclass(frozen, module = "concept_probe")]
pub struct Snapshot {
    inner: ConceptSpaceSnapshot,
    path: PathBuf,
}

#[pymethods]
impl Snapshot {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = load_snapshot(&dir).map_err(core_err)?;
        Ok(Snapshot { inner, path: dir })
    }

    #[getter]
    fn snapshot_id(&self) -> &str {
        &self.inner.snapshot_id
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.path.clone()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    /// Concept records, optionally for one class. Discarded concepts are
    /// included on request.
    #[pyo3(signature = (class_k = None, include_discarded = false))]
    fn concepts<'py>(&self, py: Python<'py>, class_k: Option<usize>, include_discarded: bool) -> PyResult<Bound<'py, PyAny>> {
        let discarded = if include_discarded { &self.inner.discarded[..] } else { &[] };
        let records: Vec<_> = self
            .inner
            .concepts
            .iter()
            .chain(discarded)
            .map(|c| &c.record)
            .filter(|r| class_k.is_none_or(|k| r.class_k == k))
            .collect();
        to_py(py, &records)
    }

    fn clusters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.clusters)
    }

    fn predictions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.predictions)
    }

    /// The export document as a dict.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &export_json(&self.inner).map_err(core_err)?)
    }

    fn to_json(&self) -> PyResult<String> {
        let doc = export_json(&self.inner).map_err(core_err)?;
        serde_json::to_string_pretty(&doc).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Snapshot({}, {} concepts)", self.inner.snapshot_id, self.inner.concepts.len())
    }
}

#[pyclass(frozen, module = "concept_probe")]
pub struct Model {
    inner: ModelGraph,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: load_model(&path).map_err(core_err)? })
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    /// `[height, width, channels]`.
    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    #[getter]
    fn layers(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Prediction for a flat, row-major HWC image with values in [0, 1].
    fn predict<'py>(&self, py: Python<'py>, pixels: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let image = image_tensor(pixels, self.inner.input_shape())?;
        to_py(py, &self.inner.predict(&image).map_err(core_err)?)
    }

    /// Activation at `layer` as `(shape, flat values)`.
    fn activation(&self, pixels: Vec<f64>, layer: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let image = image_tensor(pixels, self.inner.input_shape())?;
        let act = self.inner.activation(&image, layer).map_err(core_err)?;
        Ok((act.shape().to_vec(), act.to_f64()))
    }

    /// Gradient of the class logit with respect to the activation at `layer`.
    fn gradient(&self, pixels: Vec<f64>, layer: &str, class_k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let image = image_tensor(pixels, self.inner.input_shape())?;
        let grad = self.inner.gradient_at_layer(&image, layer, class_k).map_err(core_err)?;
        Ok((grad.shape().to_vec(), grad.to_f64()))
    }
}

/// Minimum-cost assignment; returns the column of each row.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    concept_probe::spatial::hungarian(&cost).map_err(core_err)
}

/// Two-sided one-sample t-test; returns `(t, df, p_value)`.
#[pyfunction]
fn one_sample_t_test(samples: Vec<f64>, mu0: f64) -> PyResult<(f64, f64, f64)> {
    let t = concept_probe::tcav::one_sample_t_test(&samples, mu0).map_err(core_err)?;
    Ok((t.t, t.df, t.p_value))
}

#[pyfunction]
fn silhouette_score(vectors: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    concept_probe::clustering::silhouette_score(&vectors, &labels).map_err(core_err)
}

/// Superpixels of a flat HWC image; returns `(n_labels, row-major labels)`.
#[pyfunction]
fn slic(pixels: Vec<f64>, shape: [usize; 3], n_segments: usize) -> PyResult<(usize, Vec<usize>)> {
    let image = image_tensor(pixels, shape)?;
    let sp = slic_segment(&image, &SlicParams::new(n_segments)).map_err(core_err)?;
    Ok((sp.n_labels, sp.labels))
}

#[pymodule(name = "concept_probe")]
pub fn concept_probe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FIXTURE_CONFIG", PyString::new(m.py(), FIXTURE_CONFIG))?;
    m.add_class::<Snapshot>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(build_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(one_sample_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette_score, m)?)?;
    m.add_function(wrap_pyfunction!(slic, m)?)?;
    Ok(())
}
