//! Python bindings: scene generation, matching, box geometry, the warm-up
//! schedule, the gradient-check suite and a stateful trainer.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use detr::checkpoint;
use detr::config::{RunConfig, KEYS};
use detr::decoder::{infer, Mode};
use detr::gradcheck::GradCheckOptions;
use detr::synthdata::{generate, SceneSpec};
use detr::trainer::{
    eval_dataset, evaluate, train_dataset, train_until, Dataset, TrainConfig, TrainState,
};
use detr::{Error, Tensor};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Format(_) | Error::Checkpoint(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Round-trips through `json.loads` so nested structs arrive as plain dicts.
fn to_py<'py, S: Serialize + ?Sized>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

type Rows = Vec<Vec<f32>>;

fn rows(t: &Tensor<f32>) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "main" => Ok(Mode::Main),
        "aux" => Ok(Mode::Aux),
        _ => Err(PyValueError::new_err(format!(
            "mode must be 'main' or 'aux', got {mode:?}"
        ))),
    }
}

/// Applies `key=value` overrides; values may be strings, numbers or booleans.
fn run_config(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(b) = v.extract::<bool>() {
                if b { "on" } else { "off" }.to_string()
            } else {
                v.str()?.to_string()
            };
            cfg.set(&key, &value).map_err(to_py_err)?;
        }
    }
    cfg.validate().map_err(to_py_err)?;
    Ok(cfg)
}

/// Every accepted configuration key, in canonical order.
#[pyfunction]
fn config_keys() -> Vec<&'static str> {
    KEYS.to_vec()
}

/// Synthetic scenes as dicts with `boxes` (normalized cx, cy, w, h) and `classes`.
#[pyfunction]
#[pyo3(signature = (count, seed=0, classes=None, max_objects=None))]
fn generate_scenes<'py>(
    py: Python<'py>,
    count: usize,
    seed: u64,
    classes: Option<usize>,
    max_objects: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let defaults = SceneSpec::default();
    let spec = SceneSpec {
        seed,
        classes: classes.unwrap_or(defaults.classes),
        max_objects: max_objects.unwrap_or(defaults.max_objects),
        ..defaults
    };
    let scenes = generate(&spec, count).map_err(to_py_err)?;
    to_py(py, &scenes)
}

/// Minimum-cost one-to-one assignment of columns (objects) to rows (queries).
///
/// Returns `(query, object)` pairs sorted by query.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let n = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err(
            "cost rows must all have the same length",
        ));
    }
    let t = Tensor::new(&[n, k], cost.concat()).map_err(to_py_err)?;
    let m = detr::assignment::hungarian(&t).map_err(to_py_err)?;
    let mut pairs = m.pairs;
    pairs.sort_unstable();
    Ok(pairs)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    detr::boxes::iou(a, b)
}

#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    detr::boxes::giou(a, b)
}

/// Auxiliary-loss weight at step `t` under the cosine warm-up.
#[pyfunction]
#[pyo3(signature = (t, steps=2000, warmup_frac=0.5, alpha_min=0.0, alpha_max=1.0))]
fn alpha_schedule(t: u64, steps: u64, warmup_frac: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    let cfg = TrainConfig {
        steps,
        warmup_frac,
        alpha_min,
        alpha_max,
        ..Default::default()
    };
    detr::trainer::alpha_schedule(t, &cfg)
}

/// Runs the finite-difference suite; returns `{"passed": bool, "reports": [...]}`.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    let reports = py
        .detach(|| detr::gradsuite::run_suite(GradCheckOptions::default()))
        .map_err(to_py_err)?;
    let passed = reports.iter().all(|r| r.passed);
    to_py(
        py,
        &serde_json::json!({ "passed": passed, "reports": reports }),
    )
}

/// A training run: model, optimizer and both scene sets.
#[pyclass(module = "route_detr")]
struct Trainer {
    state: TrainState<f32>,
    train: Dataset<f32>,
    eval: Dataset<f32>,
}

impl Trainer {
    fn from_state(state: TrainState<f32>) -> PyResult<Self> {
        let train = train_dataset(&state.config).map_err(to_py_err)?;
        let eval = eval_dataset(&state.config).map_err(to_py_err)?;
        Ok(Self { state, train, eval })
    }
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = run_config(config)?;
        Self::from_state(TrainState::new(cfg).map_err(to_py_err)?)
    }

    /// Restores a run saved with `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_state(checkpoint::load(&path).map_err(to_py_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.state, &path).map_err(to_py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.state.alpha()
    }

    fn config_text(&self) -> String {
        self.state.config.to_key_values()
    }

    /// Trains until `until` completed steps (default: the configured total)
    /// and returns the metric records emitted on the way.
    #[pyo3(signature = (until=None))]
    fn train<'py>(&mut self, py: Python<'py>, until: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let before = self.state.history.len();
        let Self { state, train, eval } = self;
        py.detach(|| {
            train_until(state, train, eval, until.unwrap_or(u64::MAX), None, |_| {
                Ok(())
            })
        })
        .map_err(to_py_err)?;
        to_py(py, &self.state.history[before..])
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.state.history)
    }

    /// Metrics on the held-out scenes.
    #[pyo3(signature = (mode="main"))]
    fn evaluate<'py>(&self, py: Python<'py>, mode: &str) -> PyResult<Bound<'py, PyAny>> {
        let mode = parse_mode(mode)?;
        let report = py
            .detach(|| evaluate(&self.state.model, &self.eval, mode, None))
            .map_err(to_py_err)?;
        to_py(py, &report)
    }

    /// Final-layer `(boxes, class_logits)` for one held-out scene.
    #[pyo3(signature = (index, mode="main"))]
    fn predict(&self, index: usize, mode: &str) -> PyResult<(Rows, Rows)> {
        let mode = parse_mode(mode)?;
        let patches =
            self.eval.patches.get(index).ok_or_else(|| {
                PyValueError::new_err(format!("scene index {index} out of range"))
            })?;
        let (preds, _) = infer(&self.state.model, patches, mode).map_err(to_py_err)?;
        let last = preds
            .last()
            .ok_or_else(|| PyRuntimeError::new_err("decoder produced no layers"))?;
        Ok((rows(&last.boxes), rows(&last.class_logits)))
    }

    fn __repr__(&self) -> String {
        let m = &self.state.model.config;
        format!(
            "Trainer(step={}/{}, routing={}, params={})",
            self.state.step,
            self.state.config.train.steps,
            m.routing_enabled,
            self.state.model.params.numel()
        )
    }
}

#[pymodule]
fn route_detr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
