use ndarray::Array2;
use otpe_core::data::{Encoding, Randman, RandmanSpec};
use otpe_core::snn::forward_sequence;
use otpe_core::train::loss::{LossKind, LossSpec};
use otpe_core::train::{
    cosine_similarity, evaluate, read_checkpoint, train, write_checkpoint, DataSource, Engine, RunLog, TrainConfig,
};
use otpe_core::{Algorithm, Error, GradientRecord, LifParams, ResetMode};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged input: every time step needs the same channel count"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn layers(g: &GradientRecord) -> Vec<Vec<Vec<f64>>> {
    g.layers
        .iter()
        .map(|l| l.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// Feed-forward LIF network with dense layers.
#[pyclass(name = "Network", module = "otpe", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNetwork {
    inner: otpe_core::Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (widths, leak=0.98, threshold=1.0, slope=25.0, gain=2.0, seed=0))]
    fn new(widths: Vec<usize>, leak: f64, threshold: f64, slope: f64, gain: f64, seed: u64) -> PyResult<Self> {
        let lif = LifParams::new(leak, threshold, slope).map_err(to_py)?;
        let inner = otpe_core::Network::init(&widths, lif, gain, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: read_checkpoint(path).map_err(to_py)?.network,
        })
    }

    #[pyo3(signature = (path, minibatch=0))]
    fn save(&self, path: &str, minibatch: u64) -> PyResult<()> {
        write_checkpoint(path, &self.inner, minibatch).map_err(to_py)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.widths()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.inner.flat_params()
    }

    fn set_flat_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_flat_params(&params).map_err(to_py)
    }

    /// Output spikes per step for an input raster shaped `[T][channels]`.
    fn forward(&self, spikes: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(spikes)?;
        let traj = forward_sequence(&self.inner, x.view()).map_err(to_py)?;
        Ok(traj.outputs().map(|o| o.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Network(widths={:?})", self.inner.widths())
    }
}

/// Loss and per-layer gradient of the summed-output cross-entropy for one example.
#[pyfunction]
#[pyo3(signature = (net, spikes, label, algorithm="otpe", reset="surrogate"))]
fn gradients(
    net: &PyNetwork,
    spikes: Vec<Vec<f64>>,
    label: usize,
    algorithm: &str,
    reset: &str,
) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let net = &net.inner;
    let algorithm: Algorithm = parse(algorithm)?;
    let reset: ResetMode = parse(reset)?;
    let loss = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, net.n_outputs()).map_err(to_py)?;
    let x = matrix(spikes)?;
    let traj = forward_sequence(net, x.view()).map_err(to_py)?;
    let outputs: Vec<_> = traj.outputs().cloned().collect();
    let mut engine = Engine::new(net, algorithm, reset, None, 1.0, otpe_core::exact::DEFAULT_RTRL_CAP).map_err(to_py)?;
    let (l, g) = engine
        .sequence_gradients(net, &traj, &outputs, label, &loss)
        .map_err(to_py)?;
    Ok((l, layers(&g)))
}

/// Per-layer and model-wide cosine between two gradients from `gradients`.
#[pyfunction]
fn cosine(a: Vec<Vec<Vec<f64>>>, b: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<f64>, f64)> {
    let record = |g: Vec<Vec<Vec<f64>>>| -> PyResult<GradientRecord> {
        Ok(GradientRecord {
            layers: g.into_iter().map(matrix).collect::<PyResult<_>>()?,
        })
    };
    let (a, b) = (record(a)?, record(b)?);
    if a.layers.len() != b.layers.len() || a.layers.iter().zip(&b.layers).any(|(x, y)| x.dim() != y.dim()) {
        return Err(PyValueError::new_err("gradient shapes differ"));
    }
    let c = cosine_similarity(&a, &b);
    Ok((c.per_layer.iter().map(|x| x.value).collect(), c.model.value))
}

/// Persistent per-example trace elements of an online algorithm, per layer.
#[pyfunction]
#[pyo3(signature = (net, algorithm))]
fn trace_elements(net: &PyNetwork, algorithm: &str) -> PyResult<Vec<usize>> {
    let algorithm: Algorithm = parse(algorithm)?;
    match Engine::new(&net.inner, algorithm, ResetMode::Surrogate, None, 1.0, otpe_core::exact::DEFAULT_RTRL_CAP)
        .map_err(to_py)?
    {
        Engine::Stream(e) => Ok(e.trace_elements()),
        Engine::Bptt(_) => Err(PyValueError::new_err("bptt keeps the whole trajectory, not a trace")),
    }
}

fn randman_spec(encoding: &str, seed: u64, classes: usize, neurons: usize, time_steps: usize) -> PyResult<RandmanSpec> {
    let encoding = match encoding {
        "time" | "t" => Encoding::Time,
        "rate" | "r" => Encoding::Rate,
        other => return Err(PyValueError::new_err(format!("unknown encoding `{other}`"))),
    };
    Ok(RandmanSpec {
        encoding,
        seed,
        num_classes: classes,
        neurons,
        time_steps,
        ..RandmanSpec::default()
    })
}

/// Seeded Randman examples as `(spikes[N][T][C], labels)`.
#[pyfunction]
#[pyo3(signature = (size, batch_index=0, seed=0, encoding="time", classes=10, neurons=50, time_steps=50))]
fn randman_batch(
    size: usize,
    batch_index: u64,
    seed: u64,
    encoding: &str,
    classes: usize,
    neurons: usize,
    time_steps: usize,
) -> PyResult<(Vec<Vec<Vec<u8>>>, Vec<usize>)> {
    let spec = randman_spec(encoding, seed, classes, neurons, time_steps)?;
    let raster = Randman::new(spec).map_err(to_py)?.sample_batch(size, batch_index);
    let spikes = raster
        .spikes
        .outer_iter()
        .map(|ex| ex.outer_iter().map(|t| t.to_vec()).collect())
        .collect();
    Ok((spikes, raster.labels))
}

/// Offline training on Randman. Returns the trained network, the final
/// validation loss and accuracy, and the per-minibatch training loss.
/// `lr` defaults to 0.03 for time coding and 0.003 for rate coding; rate-coded
/// input also wants a network built with `gain=1.0`.
#[pyfunction]
#[pyo3(signature = (net, algorithm="otpe", minibatches=100, batch_size=64, lr=None, seed=0, encoding="time", valid_size=256))]
#[allow(clippy::too_many_arguments)]
fn train_randman(
    py: Python<'_>,
    net: &PyNetwork,
    algorithm: &str,
    minibatches: usize,
    batch_size: usize,
    lr: Option<f64>,
    seed: u64,
    encoding: &str,
    valid_size: usize,
) -> PyResult<(PyNetwork, f64, f64, Vec<f64>)> {
    let n = &net.inner;
    let spec = randman_spec(encoding, seed, n.n_outputs(), n.n_inputs(), 50)?;
    let lr = lr.unwrap_or(if spec.encoding == Encoding::Rate { 0.003 } else { 0.03 });
    let data = DataSource::randman(spec, valid_size).map_err(to_py)?;
    let loss = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, n.n_outputs()).map_err(to_py)?;
    let mut cfg = TrainConfig::new(parse(algorithm)?, loss);
    cfg.minibatches = minibatches;
    cfg.batch_size = batch_size;
    cfg.optimizer.lr = lr;
    cfg.valid_every = 0;
    let start = n.clone();
    let (outcome, log) = py
        .detach(move || {
            let mut log = RunLog::new();
            train(start, &data, &cfg, &mut log).map(|o| (o, log))
        })
        .map_err(to_py)?;
    let losses = log.records.iter().map(|r| r.train_loss).collect();
    Ok((
        PyNetwork { inner: outcome.network },
        outcome.valid_loss,
        outcome.valid_accuracy,
        losses,
    ))
}

/// Mean loss and accuracy of `net` on labelled examples shaped `[N][T][C]`.
#[pyfunction]
fn evaluate_examples(net: &PyNetwork, spikes: Vec<Vec<Vec<u8>>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
    let n = &net.inner;
    let (count, t) = (spikes.len(), spikes.first().map_or(0, Vec::len));
    let c = spikes.first().and_then(|e| e.first()).map_or(0, Vec::len);
    let flat: Vec<u8> = spikes.into_iter().flatten().flatten().collect();
    let arr = ndarray::Array3::from_shape_vec((count, t, c), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let raster = otpe_core::SpikeRaster::new(arr, labels, n.n_outputs()).map_err(to_py)?;
    let loss = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, n.n_outputs()).map_err(to_py)?;
    evaluate(n, &raster, &loss).map_err(to_py)
}

#[pymodule]
fn otpe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(gradients, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(trace_elements, m)?)?;
    m.add_function(wrap_pyfunction!(randman_batch, m)?)?;
    m.add_function(wrap_pyfunction!(train_randman, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_examples, m)?)?;
    m.add("ALGORITHMS", Algorithm::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    Ok(())
}
