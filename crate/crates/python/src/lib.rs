//! Python bindings. Matrices cross the boundary as lists of rows.

use aglp_core::checkpoint::{model_archive, model_from_archive, Archive};
use aglp_core::data::{Split, SsdaDataset};
use aglp_core::losses::{pairwise_pseudo_labels, RampSchedule};
use aglp_core::model::InstanceGraph;
use aglp_core::prototypes::{compute_prototypes, TemperatureMode};
use aglp_core::trainer::{evaluate, Preset};
use aglp_core::{make_gaussian_shift, Error, ExperimentConfig, GaussianShiftParams, Matrix};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_config() || matches!(e, Error::Dimension { .. } | Error::Contract(_) | Error::EmptyClasses(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// A synthetic or loaded domain adaptation problem.
#[pyclass(name = "Dataset", module = "aglp", frozen)]
struct PyDataset(SsdaDataset);

#[pymethods]
impl PyDataset {
    /// Gaussian blobs on a circle; the target is rotated and translated.
    #[staticmethod]
    #[pyo3(signature = (classes=4, dim=2, n_source=400, n_target=400, n_test=1000, shots=3, shift=1.5, rotation=30.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn gaussian_shift(
        classes: usize,
        dim: usize,
        n_source: usize,
        n_target: usize,
        n_test: usize,
        shots: usize,
        shift: f64,
        rotation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let p = GaussianShiftParams {
            classes,
            dim,
            n_source,
            n_target,
            n_test,
            shots,
            shift,
            rotation,
            seed,
            ..Default::default()
        };
        make_gaussian_shift(&p).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| py_err(e.into()))?;
        SsdaDataset::read_csv(std::io::BufReader::new(f)).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| py_err(e.into()))?;
        self.0.write_csv(std::io::BufWriter::new(f)).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    /// `(features, labels)`; labels is `None` for the unlabeled split.
    fn split(&self, name: &str) -> PyResult<(Vec<Vec<f64>>, Option<Vec<usize>>)> {
        let split: Split = name.parse().map_err(py_err)?;
        let (x, y) = self.0.split(split);
        Ok((to_rows(x), y.map(<[usize]>::to_vec)))
    }

    fn __len__(&self) -> usize {
        self.0.total_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(classes={}, dim={}, source={}, labeled={}, unlabeled={})",
            self.0.classes,
            self.0.dim,
            self.0.source.len(),
            self.0.labeled.len(),
            self.0.unlabeled.rows()
        )
    }
}

/// Experiment configuration; the TOML layout of the command-line tool.
#[pyclass(name = "Config", module = "aglp", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=""))]
    fn new(toml: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(toml).map(Self).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    /// A copy with an ablation preset applied (`s+t`, `baseline`, `saa`,
    /// `ca`, `full`).
    fn with_preset(&self, name: &str) -> PyResult<Self> {
        let p: Preset = name.parse().map_err(py_err)?;
        let mut c = self.0.clone();
        c.trainer = p.apply(c.trainer);
        Ok(Self(c))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.trainer.steps
    }

    #[setter]
    fn set_steps(&mut self, v: usize) {
        self.0.trainer.steps = v;
    }

    #[getter]
    fn warmup(&self) -> usize {
        self.0.trainer.warmup
    }

    #[setter]
    fn set_warmup(&mut self, v: usize) {
        self.0.trainer.warmup = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.trainer.seed
    }

    /// Sets the data and model seed together.
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.0 = self.0.clone().with_seed(v);
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.trainer.beta
    }

    #[setter]
    fn set_beta(&mut self, v: f64) {
        self.0.trainer.beta = v;
    }

    /// Generates the dataset described by the `[dataset]` table.
    fn dataset(&self) -> PyResult<PyDataset> {
        make_gaussian_shift(&self.0.dataset).map(PyDataset).map_err(py_err)
    }
}

/// Trained network in evaluation mode.
#[pyclass(name = "Model", module = "aglp", frozen)]
struct PyModel(aglp_core::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(path).map_err(py_err)?;
        model_from_archive(&a, 0.0).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model_archive(&self.0).save(path).map_err(py_err)
    }

    /// Class probabilities; every `chunk` rows share one instance graph.
    #[pyo3(signature = (features, chunk=64))]
    fn predict(&self, features: Vec<Vec<f64>>, chunk: usize) -> PyResult<Vec<Vec<f64>>> {
        let (_, p) = self.0.predict(&to_matrix(features)?, chunk.max(1)).map_err(py_err)?;
        Ok(to_rows(&p))
    }

    /// Fused extractor and structure features.
    #[pyo3(signature = (features, chunk=64))]
    fn features(&self, features: Vec<Vec<f64>>, chunk: usize) -> PyResult<Vec<Vec<f64>>> {
        let (f, _) = self.0.predict(&to_matrix(features)?, chunk.max(1)).map_err(py_err)?;
        Ok(to_rows(&f))
    }

    /// `{"accuracy", "per_class", "confusion"}`.
    #[pyo3(signature = (features, labels, chunk=64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        chunk: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate(&self.0, &to_matrix(features)?, &labels, chunk.max(1)).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("per_class", r.per_class)?;
        d.set_item("confusion", r.confusion)?;
        Ok(d)
    }

    #[getter]
    fn uses_structure(&self) -> bool {
        self.0.use_saa
    }

    #[getter]
    fn fused_dim(&self) -> usize {
        self.0.fused_dim()
    }
}

#[pyclass(name = "TrainResult", module = "aglp", frozen)]
struct PyTrainResult {
    #[pyo3(get)]
    target_accuracy: f64,
    #[pyo3(get)]
    source_accuracy: f64,
    /// One dict per step with the loss terms, total and learning rate.
    log: Vec<aglp_core::LossReport>,
    model: aglp_core::Model,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn log<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                for (k, v) in [
                    ("source", r.source),
                    ("ce", r.ce),
                    ("aac", r.aac),
                    ("pl", r.pl),
                    ("con", r.con),
                    ("ca", r.ca),
                    ("total", r.total),
                    ("lr", r.lr),
                ] {
                    d.set_item(k, v)?;
                }
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel(self.model.clone())
    }
}

/// Trains on `dataset` (or the config's own dataset) and evaluates on the
/// held-out splits. Releases the GIL while training.
#[pyfunction]
#[pyo3(signature = (config, dataset=None))]
fn train(py: Python<'_>, config: &PyConfig, dataset: Option<&PyDataset>) -> PyResult<PyTrainResult> {
    let cfg = config.0.clone();
    let owned;
    let data = match dataset {
        Some(d) => &d.0,
        None => {
            owned = make_gaussian_shift(&cfg.dataset).map_err(py_err)?;
            &owned
        }
    };
    let out = py.detach(|| aglp_core::run(&cfg.trainer, data)).map_err(py_err)?;
    Ok(PyTrainResult {
        target_accuracy: out.target.accuracy,
        source_accuracy: out.source.accuracy,
        log: out.log,
        model: out.state.model,
    })
}

/// Consistency ramp `coefficient * exp(-5 (1 - t/T)^2)`, 1 after `T`.
#[pyfunction]
#[pyo3(signature = (step, total_steps, coefficient=1.0))]
fn ramp_weight(step: usize, total_steps: usize, coefficient: f64) -> f64 {
    RampSchedule { coefficient, total_steps }.weight(step)
}

/// Pairwise similarity: 1 where two rows share the same top-`k` index set.
#[pyfunction]
fn pairwise_labels(features: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<f64>>> {
    pairwise_pseudo_labels(&to_matrix(features)?, k).map(|m| to_rows(&m)).map_err(py_err)
}

/// `D^-1/2 (S S^T + I) D^-1/2` for structure scores `S`.
#[pyfunction]
fn normalized_propagation(scores: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    InstanceGraph::from_scores(&to_matrix(scores)?).map(|g| to_rows(&g.propagation)).map_err(py_err)
}

/// Prototype classifier fitted on `(features, labels)` applied to `queries`.
#[pyfunction]
#[pyo3(signature = (features, labels, classes, queries, temperature=0.6, divide=false))]
fn prototype_predict(
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    queries: Vec<Vec<f64>>,
    temperature: f64,
    divide: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let mode = if divide { TemperatureMode::Divide } else { TemperatureMode::Multiply };
    let set = compute_prototypes(&to_matrix(features)?, &labels, classes, temperature, mode).map_err(py_err)?;
    set.predict(&to_matrix(queries)?).map(|m| to_rows(&m)).map_err(py_err)
}

#[pymodule]
fn aglp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ramp_weight, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_labels, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_propagation, m)?)?;
    m.add_function(wrap_pyfunction!(prototype_predict, m)?)?;
    Ok(())
}
