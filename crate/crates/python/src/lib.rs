//! Python module `balred_ssm`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use balred_ssm::balance::{self, hankel_values, ReduceOptions, Stabilize};
use balred_ssm::data::{gen_adding_problem, gen_marked_majority, Dataset, Sample};
use balred_ssm::dss::{kernel, materialize_ssm, DssParams};
use balred_ssm::network::{model_forward, Checkpoint, LambdaInit, ModelConfig, Provenance, Stage};
use balred_ssm::pipeline;
use balred_ssm::ssm::{gramians_diagonal, DiagonalSsm};
use balred_ssm::training::{evaluate, TrainConfig};
use balred_ssm::Error;

create_exception!(balred_ssm, NumericalError, PyArithmeticError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(msg) => PyOSError::new_err(msg),
        e if e.is_numerical() => NumericalError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn samples(tokens: Vec<Vec<u32>>, labels: Vec<usize>) -> PyResult<Vec<Sample>> {
    if tokens.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} sequences but {} labels", tokens.len(), labels.len())));
    }
    Ok(tokens.into_iter().zip(labels).map(|(tokens, label)| Sample { tokens, label }).collect())
}

fn unpack(ds: Dataset) -> (Vec<Vec<u32>>, Vec<usize>) {
    ds.samples.into_iter().map(|s| (s.tokens, s.label)).unzip()
}

fn policy(name: &str) -> PyResult<Stabilize> {
    name.parse().map_err(to_py)
}

/// A model checkpoint with its configuration and provenance.
#[pyclass(name = "Checkpoint", module = "balred_ssm", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

impl PyCheckpoint {
    fn feature(&self, layer: usize, h: usize) -> PyResult<&DssParams> {
        self.inner
            .params
            .layers
            .get(layer)
            .and_then(|lp| lp.dss.get(h))
            .ok_or_else(|| PyValueError::new_err(format!("no feature h={h} in layer {layer}")))
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(|inner| PyCheckpoint { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Checkpoint::from_json(text).map(|inner| PyCheckpoint { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    #[getter]
    fn stage(&self) -> String {
        serde_json::to_value(self.inner.provenance.stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    #[getter]
    fn parent_hash(&self) -> Option<String> {
        self.inner.provenance.parent_hash.clone()
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.config.n
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_params()
    }

    fn verify_parent(&self, parent: &PyCheckpoint) -> PyResult<()> {
        self.inner.verify_parent(&parent.inner).map_err(to_py)
    }

    fn logits(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        model_forward(&self.inner.params, &self.inner.config, &tokens).map_err(to_py)
    }

    /// Mean loss and accuracy.
    fn evaluate(&self, tokens: Vec<Vec<u32>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
        evaluate(&self.inner.params, &self.inner.config, &samples(tokens, labels)?).map_err(to_py)
    }

    /// Convolution kernel of one feature over the model's sequence length.
    fn kernel(&self, layer: usize, h: usize) -> PyResult<Vec<Complex64>> {
        kernel(self.feature(layer, h)?, self.inner.config.l).map_err(to_py)
    }

    #[pyo3(signature = (layer, h, stabilize = "error"))]
    fn hankel_values(&self, layer: usize, h: usize, stabilize: &str) -> PyResult<Vec<f64>> {
        let sys = materialize_ssm(self.feature(layer, h)?, self.inner.config.l).map_err(to_py)?;
        let (sys, _) = balance::stabilize(&sys, policy(stabilize)?).map_err(to_py)?;
        let g = gramians_diagonal(&sys).map_err(to_py)?;
        hankel_values(&g.p, &g.q).map_err(to_py)
    }

    /// Balanced truncation of every kernel to order `r`, pulled back into
    /// diagonal form.
    #[pyo3(signature = (r, stabilize = "error"))]
    fn compress(&self, r: usize, stabilize: &str) -> PyResult<PyCheckpoint> {
        let opts = ReduceOptions { stabilize: policy(stabilize)?, ..ReduceOptions::default() };
        pipeline::compress(&self.inner, r, &opts).map(|inner| PyCheckpoint { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Checkpoint(stage={}, layers={}, h={}, n={}, l={})", self.stage(), c.n_layers, c.h, c.n, c.l)
    }
}

/// Skew-HiPPO eigenvalues (positive imaginary half) for state size `n`.
#[pyfunction]
fn skew_hippo_eigs(n: usize) -> PyResult<Vec<Complex64>> {
    balred_ssm::hippo::skew_hippo_eigs(n).map_err(to_py)
}

#[pyfunction]
fn marked_majority(n: usize, l: usize, seed: u64) -> PyResult<(Vec<Vec<u32>>, Vec<usize>)> {
    gen_marked_majority(n, l, seed).map(unpack).map_err(to_py)
}

#[pyfunction]
fn adding_problem(n: usize, l: usize, seed: u64) -> PyResult<(Vec<Vec<u32>>, Vec<usize>)> {
    gen_adding_problem(n, l, seed).map(unpack).map_err(to_py)
}

/// Trains a model from scratch. Configurations are JSON strings; missing
/// training keys take their defaults.
#[pyfunction]
#[pyo3(signature = (model_config, train_config, tokens, labels, eval_tokens, eval_labels, init = "hippo"))]
fn train(
    model_config: &str,
    train_config: &str,
    tokens: Vec<Vec<u32>>,
    labels: Vec<usize>,
    eval_tokens: Vec<Vec<u32>>,
    eval_labels: Vec<usize>,
    init: &str,
) -> PyResult<PyCheckpoint> {
    let cfg: ModelConfig = parse_json("model config", model_config)?;
    let tc: TrainConfig = parse_json("train config", train_config)?;
    let init: LambdaInit = init.parse().map_err(to_py)?;
    let (train, eval) = (samples(tokens, labels)?, samples(eval_tokens, eval_labels)?);
    let res = pipeline::train_from_scratch(&cfg, init, &tc, &train, &eval).map_err(to_py)?;
    Ok(PyCheckpoint { inner: res.checkpoint })
}

/// Continues training a reduced checkpoint with a fresh optimizer.
#[pyfunction]
fn retrain(
    reduced: &PyCheckpoint,
    train_config: &str,
    tokens: Vec<Vec<u32>>,
    labels: Vec<usize>,
    eval_tokens: Vec<Vec<u32>>,
    eval_labels: Vec<usize>,
) -> PyResult<PyCheckpoint> {
    let tc: TrainConfig = parse_json("train config", train_config)?;
    let (train, eval) = (samples(tokens, labels)?, samples(eval_tokens, eval_labels)?);
    let res = pipeline::retrain(&reduced.inner, &tc, &train, &eval).map_err(to_py)?;
    Ok(PyCheckpoint { inner: res.checkpoint })
}

/// Wraps freshly initialized parameters as a pretrain-stage checkpoint.
#[pyfunction]
#[pyo3(signature = (model_config, init = "hippo"))]
fn init_checkpoint(model_config: &str, init: &str) -> PyResult<PyCheckpoint> {
    use rand::SeedableRng;
    let cfg: ModelConfig = parse_json("model config", model_config)?;
    let init: LambdaInit = init.parse().map_err(to_py)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = balred_ssm::network::ModelParams::init(&cfg, init, &mut rng).map_err(to_py)?;
    let prov = Provenance {
        stage: Stage::Pretrain,
        init: init.to_string(),
        parent_hash: None,
        rng_seed: cfg.seed,
        reduction: None,
        notes: BTreeMap::new(),
    };
    Checkpoint::new(cfg, params, prov).map(|inner| PyCheckpoint { inner }).map_err(to_py)
}

/// Balanced truncation of one diagonal system. Returns the reduced
/// `(a, b, c)` and the Hankel spectrum with the error bounds.
#[pyfunction]
#[pyo3(signature = (lam, b, c, delta, r, stabilize = "error"))]
fn reduce_system<'py>(
    py: Python<'py>,
    lam: Vec<Complex64>,
    b: Vec<Complex64>,
    c: Vec<Complex64>,
    delta: f64,
    r: usize,
    stabilize: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let sys = DiagonalSsm::new(lam, b, c, delta).map_err(to_py)?;
    let opts = ReduceOptions { stabilize: policy(stabilize)?, ..ReduceOptions::default() };
    let (red, rep) = balance::reduce(&sys, r, &opts).map_err(to_py)?;
    let n = red.order();
    let a: Vec<Vec<Complex64>> = (0..n).map(|i| red.a.row(i).to_vec()).collect();
    let out = PyDict::new(py);
    out.set_item("a", a)?;
    out.set_item("b", red.b)?;
    out.set_item("c", red.c)?;
    out.set_item("sigma", rep.sigma)?;
    out.set_item("lower_bound", rep.lower_bound)?;
    out.set_item("upper_bound", rep.upper_bound)?;
    out.set_item("sampled_hinf_error", rep.sampled_hinf_error)?;
    Ok(out)
}

/// Runs the built-in property checks; returns `(name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selftest(seed: u64) -> Vec<(String, bool, String)> {
    balred_ssm::selftest::run_all(seed).into_iter().map(|r| (r.name.to_string(), r.passed, r.detail)).collect()
}

#[pymodule]
#[pyo3(name = "balred_ssm")]
fn balred_ssm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(skew_hippo_eigs, m)?)?;
    m.add_function(wrap_pyfunction!(marked_majority, m)?)?;
    m.add_function(wrap_pyfunction!(adding_problem, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(retrain, m)?)?;
    m.add_function(wrap_pyfunction!(init_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_system, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
