use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fieldmatch::config::{ExperimentConfig, KEYS};
use fieldmatch::eval::{self, metric_names};
use fieldmatch::experiment::{self, ExperimentData, Model};
use fieldmatch::gradsuite::run_suite;
use fieldmatch::pretrain;
use fieldmatch::tensor::Tensor;
use fieldmatch::train::{random_average_precision as random_ap, rank_companies};
use fieldmatch::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) if e.to_string().contains("unknown configuration key") => PyKeyError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Flat `key = value` experiment configuration.
#[pyclass(name = "Config", module = "fieldmatch_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path = None, overrides = None, seed = None))]
    fn new(path: Option<&str>, overrides: Option<Vec<String>>, seed: Option<u64>) -> PyResult<Self> {
        let mut inner = match path {
            Some(p) => ExperimentConfig::load(std::path::Path::new(p)).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.apply_overrides(&overrides.unwrap_or_default()).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    /// Every accepted key, in canonical order.
    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        KEYS.to_vec()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(to_py)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __repr__(&self) -> String {
        format!("Config(fingerprint={})", self.inner.short_fingerprint())
    }
}

/// Generated corpus and splits plus, after `run`, a trained model.
#[pyclass(name = "Experiment", module = "fieldmatch_py", unsendable)]
struct PyExperiment {
    cfg: ExperimentConfig,
    data: ExperimentData,
    model: Option<Model>,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let data = ExperimentData::generate(&config.inner).map_err(to_py)?;
        Ok(PyExperiment {
            cfg: config.inner.clone(),
            data,
            model: None,
        })
    }

    /// Example, record and vocabulary counts.
    fn counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("solutions", self.data.solutions.len())?;
        d.set_item("companies", self.data.companies.len())?;
        d.set_item("vocab", self.data.vocab.len())?;
        d.set_item("train", self.data.train.len())?;
        d.set_item("validation", self.data.val.len())?;
        d.set_item("test", self.data.test.len())?;
        Ok(d)
    }

    fn solution_ids(&self) -> Vec<String> {
        self.data.solutions.iter().map(|s| s.id.clone()).collect()
    }

    /// Pretrains (if enabled), trains and evaluates; returns the test
    /// metrics plus `baseline_map` and `best_epoch`.
    #[pyo3(signature = (run_name = "full"))]
    fn run<'py>(&mut self, py: Python<'py>, run_name: &str) -> PyResult<Bound<'py, PyDict>> {
        let out = experiment::run(&self.cfg, &self.data, run_name).map_err(to_py)?;
        let d = PyDict::new(py);
        for name in metric_names() {
            if let Some(v) = out.report.get(&name) {
                d.set_item(name, v)?;
            }
        }
        d.set_item("baseline_map", out.baseline_map)?;
        d.set_item("best_epoch", out.train.best_epoch)?;
        d.set_item("epoch_losses", out.train.epoch_losses.clone())?;
        self.model = Some(out.model);
        Ok(d)
    }

    /// The `top` highest-scoring companies for one solution.
    #[pyo3(signature = (solution_id, top = 10))]
    fn rank(&self, solution_id: &str, top: usize) -> PyResult<Vec<(String, f64)>> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("call run() before rank()"))?;
        let solution = self.data.records().solution(solution_id).map_err(to_py)?;
        let companies: Vec<_> = self.data.companies.iter().collect();
        let mut ranked =
            rank_companies(&model.matcher, &model.store, solution, &companies, &self.data.vocab).map_err(to_py)?;
        ranked.truncate(top);
        Ok(ranked)
    }
}

/// Average precision of labels listed in ranked order; None without positives.
#[pyfunction]
fn average_precision(ranked_labels: Vec<u8>) -> Option<f64> {
    eval::average_precision(&ranked_labels)
}

/// Rank-sum AUC with ties counted one half; None unless both classes occur.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(eval::auc(&scores, &labels))
}

#[pyfunction]
fn precision_at(ranked_labels: Vec<u8>, k: usize) -> Option<f64> {
    eval::precision_at(&ranked_labels, k)
}

#[pyfunction]
fn recall_at(ranked_labels: Vec<u8>, k: usize) -> Option<f64> {
    eval::recall_at(&ranked_labels, k)
}

/// Expected average precision of a random ranking of `n` items with `r` positives.
#[pyfunction]
fn random_average_precision(n: usize, r: usize) -> PyResult<f64> {
    random_ap(n, r).map_err(to_py)
}

/// Contrastive loss of view representations (one row per view); views with
/// equal `pair_index` are positives for each other.
#[pyfunction]
fn info_nce(reps: Vec<Vec<f64>>, pair_index: Vec<usize>, tau: f64) -> PyResult<f64> {
    let t = Tensor::from_rows(&reps).map_err(to_py)?;
    pretrain::info_nce(&t, &pair_index, tau).map_err(to_py)
}

/// Runs the finite-difference gradient suite: `(name, max relative error, passed)`.
#[pyfunction]
fn grad_check() -> PyResult<Vec<(String, f64, bool)>> {
    Ok(run_suite()
        .map_err(to_py)?
        .into_iter()
        .map(|e| {
            let ok = e.passed();
            (e.name, e.report.max_relative_error, ok)
        })
        .collect())
}

#[pymodule]
fn fieldmatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at, m)?)?;
    m.add_function(wrap_pyfunction!(random_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
