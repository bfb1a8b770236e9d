//! Python bindings for the `timemil` engine.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use timemil::config::{load_config, RunConfig};
use timemil::data::{load_checkpoint, parse_ts, save_checkpoint, Bag};
use timemil::trainer::{self, Metrics, Trainer};
use timemil::{entropy, gradcheck, interpret, synthetic, AttentionMode, Error, TimeMil};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_bag(rows: Vec<Vec<f64>>) -> PyResult<Bag> {
    let t = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("every time step needs the same number of channels"));
    }
    Bag::new("py", rows.concat(), t, d, 0).map_err(to_py)
}

fn bag_rows(b: &Bag) -> Vec<Vec<f64>> {
    b.values.chunks(b.d).map(<[f64]>::to_vec).collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("macro_f1", m.macro_f1)?;
    d.set_item("macro_precision", m.macro_precision)?;
    d.set_item("macro_recall", m.macro_recall)?;
    d.set_item("auc_roc", m.auc_roc)?;
    d.set_item("skipped_classes", m.skipped_classes.clone())?;
    Ok(d)
}

/// Reads a `.ts` file into `{name, dimensions, class_labels, bags}`; each bag
/// holds `id`, `values` (a list of time steps), `label` and `valid_len`.
#[pyfunction]
fn read_ts<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let (meta, bags) = parse_ts(path).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("name", meta.name)?;
    out.set_item("dimensions", meta.dimensions)?;
    out.set_item("class_labels", meta.class_labels)?;
    let items = bags
        .iter()
        .map(|b| {
            let d = PyDict::new(py);
            d.set_item("id", &b.id)?;
            d.set_item("values", bag_rows(b))?;
            d.set_item("label", b.label)?;
            d.set_item("valid_len", b.valid_len)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("bags", items)?;
    Ok(out)
}

/// Synthetic pulse bags as dicts with `values`, `label`, `instance_labels`
/// and `pulse_window` (inclusive, or `None` for negatives).
#[pyfunction]
#[pyo3(signature = (n_pos, n_neg, seed=0))]
fn synthetic_bags<'py>(py: Python<'py>, n_pos: usize, n_neg: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    synthetic::gen_dataset(n_pos, n_neg, seed)
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("values", s.values)?;
            d.set_item("label", s.bag_label)?;
            d.set_item("instance_labels", s.instance_labels)?;
            d.set_item("pulse_window", s.pulse_window)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (text, n=2))]
fn block_entropy(text: &str, n: usize) -> PyResult<f64> {
    let chars: Vec<char> = text.chars().collect();
    entropy::block_entropy(&chars, n).map_err(to_py)
}

/// Block entropy of the text after shuffling a fraction `rate` of positions.
#[pyfunction]
#[pyo3(signature = (text, rate, seed=0, n=2))]
fn shuffled_block_entropy(text: &str, rate: f64, seed: u64, n: usize) -> PyResult<f64> {
    let chars: Vec<char> = text.chars().collect();
    let s = entropy::shuffle_fraction(&chars, rate, seed).map_err(to_py)?;
    entropy::block_entropy(&s, n).map_err(to_py)
}

/// Ordered and permuted joint entropies of the two-variable Bernoulli example.
#[pyfunction]
fn prop2_example() -> (f64, f64) {
    entropy::prop2_example()
}

#[pyfunction]
#[pyo3(signature = (seed=0, trials=1000, max_vars=4, max_alphabet=3))]
fn theorem3_check<'py>(py: Python<'py>, seed: u64, trials: usize, max_vars: usize, max_alphabet: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = entropy::theorem3_check(seed, trials, max_vars, max_alphabet).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("trials", r.trials)?;
    d.set_item("violations", r.violations.len())?;
    d.set_item("min_gap", r.min_gap)?;
    d.set_item("max_gap", r.max_gap)?;
    Ok(d)
}

/// Finite-difference gradient checks; one dict per check.
#[pyfunction]
#[pyo3(signature = (module="all", seed=0))]
fn run_gradcheck<'py>(py: Python<'py>, module: &str, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = if module == "all" {
        gradcheck::run_all(seed)
    } else {
        module.parse().and_then(|s| gradcheck::run_suite(s, seed))
    }
    .map_err(to_py)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("suite", r.suite)?;
            d.set_item("name", &r.name)?;
            d.set_item("checked", r.checked)?;
            d.set_item("skipped", r.skipped)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// Trains on a `.ts` file and writes a checkpoint; returns per-epoch losses.
#[pyfunction]
#[pyo3(signature = (data, checkpoint, config=None, seed=None, epochs=None))]
fn train(data: &str, checkpoint: &str, config: Option<&str>, seed: Option<u64>, epochs: Option<usize>) -> PyResult<Vec<f64>> {
    let mut cfg = match config {
        Some(p) => load_config(p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(to_py)?;
    let (meta, bags) = parse_ts(data).map_err(to_py)?;
    let model = TimeMil::<f32>::new(cfg, meta.dimensions, meta.num_classes()).map_err(to_py)?;
    let mut tr = Trainer::from_run(model).map_err(to_py)?;
    let fit = tr.fit(&bags, None).map_err(to_py)?;
    save_checkpoint(&tr.model, &meta.class_labels, checkpoint).map_err(to_py)?;
    Ok(fit.reports.iter().map(|r| r.loss).collect())
}

/// A trained model loaded from a checkpoint directory.
#[pyclass]
struct Model {
    inner: TimeMil<f32>,
    #[pyo3(get)]
    class_labels: Vec<String>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, class_labels) = load_checkpoint(path).map_err(to_py)?;
        Ok(Self { inner, class_labels })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Logits for one series given as a list of time steps.
    fn logits(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let bag = rows_to_bag(values)?;
        let mode: AttentionMode = self.inner.config.attention_mode;
        self.inner.infer(&bag, mode).map(|(l, _)| l).map_err(to_py)
    }

    fn predict(&self, values: Vec<Vec<f64>>) -> PyResult<usize> {
        Ok(trainer::predict(&self.logits(values)?))
    }

    /// Per-time-step importance from class-token attention.
    fn importance(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let bag = rows_to_bag(values)?;
        interpret::importance(&self.inner, &bag).map(|m| m.importance).map_err(to_py)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: &str) -> PyResult<Bound<'py, PyDict>> {
        let (meta, bags) = parse_ts(data).map_err(to_py)?;
        if meta.class_labels != self.class_labels {
            return Err(PyValueError::new_err("dataset labels differ from the checkpoint"));
        }
        let m = trainer::evaluate(&self.inner, &bags).map_err(to_py)?;
        metrics_dict(py, &m)
    }
}

#[pymodule]
fn pytimemil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_ts, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_bags, m)?)?;
    m.add_function(wrap_pyfunction!(block_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(shuffled_block_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(prop2_example, m)?)?;
    m.add_function(wrap_pyfunction!(theorem3_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
