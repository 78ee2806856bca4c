//! Python bindings. Tensors cross the boundary as flat float sequences in
//! the model's input layout; configurations cross as dicts.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use far::attacks::{adversarial_ifia, ifia, pgd, AttackConfig};
use far::attribution::{integrated_gradients, saliency_map};
use far::data::{load_idx, make_synthetic, Dataset, SyntheticKind, SyntheticSpec};
use far::harness::{evaluate as evaluate_model, EvalConfig};
use far::metrics::{kendall_tau, pearson_loss, top_k_intersection};
use far::models::{initialize, CnnConfig, InitKind, InitScheme, Model};
use far::objectives::{second_order_model, train as train_model, TrainConfig};
use far::{ActivationSpec, FarError, Tensor};

fn to_py(e: FarError) -> PyErr {
    let msg = e.to_string();
    if e.is_numerical() {
        return PyArithmeticError::new_err(msg);
    }
    match e {
        FarError::Io(_) | FarError::Format(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn from_dict<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn input(model: &Model, x: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(model.input_shape().to_vec(), x).map_err(to_py)
}

fn activation(name: &str, beta: f64) -> PyResult<ActivationSpec> {
    match name {
        "relu" => Ok(ActivationSpec::relu()),
        "softplus" => Ok(ActivationSpec::softplus(beta)),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

/// A classifier with its parameters.
#[pyclass(name = "Model", module = "far", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Fully connected network; `activation` is "relu" or "softplus".
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, classes, activation = "relu", beta = 1.0))]
    fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize, activation: &str, beta: f64) -> PyResult<Self> {
        let act = self::activation(activation, beta)?;
        Ok(PyModel { inner: Model::mlp(input_dim, &hidden, classes, act).map_err(to_py)? })
    }

    /// Two-convolution classifier on height x width x channels images.
    #[staticmethod]
    #[pyo3(signature = (height, width, channels, classes, padding = 0, hidden = 1024))]
    fn small_cnn(height: usize, width: usize, channels: usize, classes: usize, padding: usize, hidden: usize) -> PyResult<Self> {
        let cfg = CnnConfig { padding, hidden, ..CnnConfig::default() };
        Ok(PyModel { inner: Model::small_cnn(&[height, width, channels], classes, &cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: Model::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// A copy initialized with `scheme` (PTD, CUST, UNI, HU, HN, GU, GN).
    fn initialize(&self, scheme: &str, seed: u64) -> PyResult<Self> {
        let kind = InitKind::parse(scheme).map_err(to_py)?;
        Ok(PyModel { inner: initialize(&self.inner, InitScheme { kind, seed }) })
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Logits of one input.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&input(&self.inner, x)?).map_err(to_py)?.data().to_vec())
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&input(&self.inner, x)?).map_err(to_py)
    }

    /// Gradient of the `class` logit with respect to the input.
    fn input_gradient(&self, x: Vec<f64>, class: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.input_gradient(&input(&self.inner, x)?, class).map_err(to_py)?.data().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_shape={:?}, classes={}, params={})",
            self.inner.input_shape(),
            self.inner.class_count(),
            self.inner.param_count()
        )
    }
}

/// Images with labels and their pixel bounds.
#[pyclass(name = "Dataset", module = "far", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: load_idx(images, labels).map_err(to_py)? })
    }

    /// `kind` is "two_gaussians" or "checkerboard".
    #[staticmethod]
    #[pyo3(signature = (kind, dimension, samples, seed, mu = 3.0, sigma = 1.0))]
    fn synthetic(kind: &str, dimension: usize, samples: usize, seed: u64, mu: f64, sigma: f64) -> PyResult<Self> {
        let kind = match kind {
            "two_gaussians" => SyntheticKind::TwoGaussians,
            "checkerboard" => SyntheticKind::Checkerboard,
            other => return Err(PyValueError::new_err(format!("unknown synthetic kind {other:?}"))),
        };
        let spec = SyntheticSpec { kind, dimension, samples, seed, mu, sigma };
        Ok(PyDataset { inner: make_synthetic(&spec).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn bounds(&self) -> (f64, f64) {
        self.inner.bounds
    }

    /// Flat image and label of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(Vec<f64>, usize)> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("sample {i} of {}", self.inner.len())));
        }
        let (x, y) = self.inner.sample(i);
        Ok((x.data().to_vec(), y))
    }

    fn subset(&self, n: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset { inner: self.inner.subset(n, seed).map_err(to_py)? })
    }

    /// Pixels mapped to [-1, 1].
    fn to_symmetric(&self) -> PyResult<Self> {
        Ok(PyDataset { inner: self.inner.to_symmetric().map_err(to_py)? })
    }
}

#[pyfunction]
fn saliency(model: &PyModel, x: Vec<f64>, class: usize) -> PyResult<Vec<f64>> {
    let x = input(&model.inner, x)?;
    Ok(saliency_map(&model.inner, &x, class).map_err(to_py)?.values.data().to_vec())
}

/// Integrated Gradients from `baseline` (zeros when absent).
#[pyfunction(name = "integrated_gradients")]
#[pyo3(signature = (model, x, class, steps = 32, baseline = None))]
fn py_integrated_gradients(model: &PyModel, x: Vec<f64>, class: usize, steps: usize, baseline: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let x = input(&model.inner, x)?;
    let b = match baseline {
        Some(b) => input(&model.inner, b)?,
        None => Tensor::zeros(x.shape()),
    };
    Ok(integrated_gradients(&model.inner, &x, &b, class, steps).map_err(to_py)?.values.data().to_vec())
}

/// Default IFIA settings (7 steps of 1.2/7 epsilon, Sum-Top-K, 3 restarts).
#[pyfunction]
#[pyo3(signature = (epsilon, k, bounds = (0.0, 1.0)))]
fn ifia_config<'py>(py: Python<'py>, epsilon: f64, k: usize, bounds: (f64, f64)) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &AttackConfig::ifia(epsilon, k, bounds))
}

/// Default PGD settings (40 steps of 0.03 epsilon, 3 restarts).
#[pyfunction]
#[pyo3(signature = (epsilon, bounds = (0.0, 1.0)))]
fn pgd_config<'py>(py: Python<'py>, epsilon: f64, bounds: (f64, f64)) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &AttackConfig::pgd(epsilon, bounds))
}

/// Runs "ifia", "adversarial_ifia" or "pgd" on one input and returns a dict
/// with the perturbed input and attack statistics.
#[pyfunction]
#[pyo3(signature = (model, x, config, method = "ifia", label = None, beta = 1.0))]
fn attack<'py>(
    py: Python<'py>,
    model: &PyModel,
    x: Vec<f64>,
    config: &Bound<'py, PyAny>,
    method: &str,
    label: Option<usize>,
    beta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: AttackConfig = from_dict(py, config)?;
    let x = input(&model.inner, x)?;
    let need_label = || label.ok_or_else(|| PyValueError::new_err(format!("{method} needs a label")));
    let smooth = second_order_model(&model.inner, beta).map_err(to_py)?;
    let result = match method {
        "ifia" => py.detach(|| ifia(&smooth, &x, &cfg)),
        "adversarial_ifia" => {
            let y = need_label()?;
            py.detach(|| adversarial_ifia(&smooth, &x, y, &cfg))
        }
        "pgd" => {
            let y = need_label()?;
            py.detach(|| pgd(&model.inner, &x, y, &cfg))
        }
        other => return Err(PyValueError::new_err(format!("unknown attack {other:?}"))),
    }
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("x_adv", result.x_adv.data().to_vec())?;
    d.set_item("prediction_preserved", result.prediction_preserved)?;
    d.set_item("final_dissimilarity", result.final_dissimilarity)?;
    d.set_item("final_objective", result.final_objective)?;
    d.set_item("iterations_used", result.iterations_used)?;
    d.set_item("restart", result.restart)?;
    d.set_item("failed_restarts", result.failed_restarts)?;
    Ok(d.into_any())
}

fn tensor(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

#[pyfunction(name = "kendall_tau")]
fn py_kendall_tau(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    kendall_tau(&tensor(a), &tensor(b)).map_err(to_py)
}

#[pyfunction(name = "top_k_intersection")]
fn py_top_k_intersection(a: Vec<f64>, b: Vec<f64>, k: usize) -> PyResult<f64> {
    top_k_intersection(&tensor(a), &tensor(b), k).map_err(to_py)
}

#[pyfunction(name = "pearson_loss")]
fn py_pearson_loss(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    pearson_loss(&tensor(a), &tensor(b)).map_err(to_py)
}

/// Trains a copy of `model`; returns it with the per-epoch statistics.
#[pyfunction]
fn train<'py>(py: Python<'py>, model: &PyModel, data: &PyDataset, config: &Bound<'py, PyAny>) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let report = py.detach(|| train_model(&model.inner, &data.inner, &cfg)).map_err(to_py)?;
    Ok((PyModel { inner: report.model }, to_dict(py, &report.epochs)?))
}

/// NA, AA, IN and CO of `model` on `data`, with per-sample records.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, data: &PyDataset, config: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: EvalConfig = from_dict(py, config)?;
    let report = py.detach(|| evaluate_model(&model.inner, &data.inner, &cfg)).map_err(to_py)?;
    to_dict(py, &report)
}

/// Default evaluation settings for budget `epsilon` and top-k size `k`.
#[pyfunction]
fn eval_config<'py>(py: Python<'py>, epsilon: f64, k: usize) -> PyResult<Bound<'py, PyAny>> {
    to_dict(py, &EvalConfig::standard(epsilon, k))
}

/// Attribution maps, attribution attacks and attributionally robust training.
#[pymodule(name = "far")]
mod far_py {
    #[pymodule_export]
    use super::{
        attack, eval_config, evaluate, ifia_config, pgd_config, py_integrated_gradients, py_kendall_tau, py_pearson_loss,
        py_top_k_intersection, saliency, train, PyDataset, PyModel,
    };
}
