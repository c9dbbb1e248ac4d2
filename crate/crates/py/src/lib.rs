//! Python module `survmamba`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use survmamba_core::numerics::Tensor;
use survmamba_core::pipeline::bench::{scan_bench as run_bench, ScanMode};
use survmamba_core::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use survmamba_core::pipeline::complexity::report_complexity;
use survmamba_core::pipeline::gradsuite::{run_gradcheck, GradModule, SuiteOptions};
use survmamba_core::pipeline::train::{evaluate, train as run_train, EvalReport};
use survmamba_core::pipeline::{
    load_dataset, save_dataset, synth_generate, ModelConfig, SurvMambaModel, SurvivalDataset, SynthSpec, TrainConfig,
};
use survmamba_core::ssm::{self, DiscretizationMode};
use survmamba_core::survstats::{self, KmCurve, SurvivalOutcome};
use survmamba_core::{fusion, Error};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("bad config JSON: {e}"))),
    }
}

fn outcomes(times: &[f64], events: &[bool]) -> PyResult<Vec<SurvivalOutcome>> {
    if times.len() != events.len() {
        return Err(PyValueError::new_err(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    times
        .iter()
        .zip(events)
        .map(|(&t, &e)| SurvivalOutcome::new(t, e).map_err(py_err))
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

fn km_dict<'py>(py: Python<'py>, km: &KmCurve) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("times", km.times.clone())?;
    d.set_item("survival", km.survival.clone())?;
    d.set_item("at_risk", km.at_risk.clone())?;
    d.set_item("events", km.events.clone())?;
    Ok(d)
}

/// Harrell's c-index; higher risk should mean earlier events.
#[pyfunction]
fn concordance_index(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    survstats::concordance_index(&risks, &outcomes(&times, &events)?).map_err(py_err)
}

#[pyfunction]
fn kaplan_meier<'py>(py: Python<'py>, times: Vec<f64>, events: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    km_dict(py, &survstats::kaplan_meier(&outcomes(&times, &events)?))
}

/// Two-group log-rank test: returns `(chi2, p)`.
#[pyfunction]
fn logrank_test(
    times_a: Vec<f64>,
    events_a: Vec<bool>,
    times_b: Vec<f64>,
    events_b: Vec<bool>,
) -> PyResult<(f64, f64)> {
    let r =
        survstats::logrank_test(&outcomes(&times_a, &events_a)?, &outcomes(&times_b, &events_b)?).map_err(py_err)?;
    Ok((r.chi2, r.p_value))
}

#[pyfunction]
fn chi2_sf(x: f64, df: f64) -> f64 {
    survstats::chi2_sf(x, df)
}

#[pyfunction]
fn survival_nll(hazards: Vec<f64>, t_bin: usize, censored: bool) -> PyResult<f64> {
    fusion::survival_nll(&fusion::HazardOutput::from_hazards(hazards), t_bin, censored).map_err(py_err)
}

/// Recurrent selective scan over flat row-major buffers. `x`, `delta`:
/// `[batch, length, channels]`; `a`: `[channels, state]`; `b`, `c`:
/// `[batch, length, state]`.
#[pyfunction]
#[pyo3(signature = (x, delta, a, b, c, batch, length, channels, state, mode = "euler", parallel = false))]
#[allow(clippy::too_many_arguments)]
fn selective_scan(
    x: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    batch: usize,
    length: usize,
    channels: usize,
    state: usize,
    mode: &str,
    parallel: bool,
) -> PyResult<Vec<f64>> {
    let mode: DiscretizationMode = mode.parse().map_err(py_err)?;
    let x = tensor(&[batch, length, channels], x)?;
    let delta = tensor(&[batch, length, channels], delta)?;
    let a = tensor(&[channels, state], a)?;
    let b = tensor(&[batch, length, state], b)?;
    let c = tensor(&[batch, length, state], c)?;
    let dp = ssm::discretize(&delta, &a, &b, mode).map_err(py_err)?;
    let y = if parallel {
        ssm::selective_scan_parallel(&x, &dp, &c)
    } else {
        ssm::selective_scan_recurrent(&x, &dp, &c)
    };
    Ok(y.map_err(py_err)?.into_data())
}

/// Per-mode timings: list of dicts with `mode`, `median_secs`, `max_dev`.
#[pyfunction]
#[pyo3(signature = (length, channels, state, reps = 3))]
fn scan_bench<'py>(
    py: Python<'py>,
    length: usize,
    channels: usize,
    state: usize,
    reps: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = run_bench(length, channels, state, &ScanMode::ALL, reps).map_err(py_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("mode", r.mode.to_string())?;
            d.set_item("median_secs", r.median_secs)?;
            d.set_item("max_dev", r.max_dev)?;
            Ok(d)
        })
        .collect()
}

/// `(case, max_rel_error, tolerance)` for one gradient-check module.
#[pyfunction]
#[pyo3(signature = (module, model_config = None, seed = 11))]
fn gradcheck(module: &str, model_config: Option<&str>, seed: u64) -> PyResult<Vec<(String, f64, f64)>> {
    let module: GradModule = module.parse().map_err(py_err)?;
    let cfg: ModelConfig = from_json(model_config)?;
    let cases = run_gradcheck(
        module,
        &cfg,
        SuiteOptions {
            max_entries: None,
            seed,
        },
    )
    .map_err(py_err)?;
    Ok(cases
        .into_iter()
        .map(|c| (c.name, c.report.max_rel_error, module.tolerance()))
        .collect())
}

/// A cohort of patients with outcomes, bins and fold assignment.
#[pyclass(name = "Dataset", module = "survmamba")]
struct PyDataset {
    inner: SurvivalDataset,
    latent: Option<Vec<f64>>,
}

#[pymethods]
impl PyDataset {
    /// Synthetic cohort; `spec` is a JSON object of generator settings.
    #[staticmethod]
    #[pyo3(signature = (spec = None, seed = 0))]
    fn synthetic(spec: Option<&str>, seed: u64) -> PyResult<Self> {
        let spec: SynthSpec = from_json(spec)?;
        let cohort = synth_generate(&spec, seed).map_err(py_err)?;
        Ok(Self {
            inner: cohort.dataset,
            latent: Some(cohort.latent),
        })
    }

    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&manifest).map_err(py_err)?,
            latent: None,
        })
    }

    /// Write a manifest directory; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        save_dataset(&self.inner, &dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.time).collect()
    }

    #[getter]
    fn events(&self) -> Vec<bool> {
        self.inner.records.iter().map(|r| !r.censored).collect()
    }

    #[getter]
    fn folds(&self) -> Vec<usize> {
        self.inner.folds.clone()
    }

    #[getter]
    fn bin_edges(&self) -> Vec<f64> {
        self.inner.bin_edges.clone()
    }

    /// Planted risk factor (synthetic cohorts only).
    #[getter]
    fn latent(&self) -> Option<Vec<f64>> {
        self.latent.clone()
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("c_index", r.c_index)?;
    d.set_item("diagnostic", r.diagnostic.clone())?;
    d.set_item("ids", r.ids.clone())?;
    d.set_item("risks", r.risks.clone())?;
    d.set_item("logrank_chi2", r.logrank.map(|l| l.chi2))?;
    d.set_item("logrank_p", r.logrank.map(|l| l.p_value))?;
    d.set_item("km_low", km_dict(py, &r.km_low)?)?;
    d.set_item("km_high", km_dict(py, &r.km_high)?)?;
    Ok(d)
}

#[pyclass(name = "Model", module = "survmamba")]
struct PyModel {
    inner: SurvMambaModel,
    #[pyo3(get)]
    losses: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Train on every fold except `fold`; `config` is a JSON training config.
    #[staticmethod]
    #[pyo3(signature = (dataset, fold, config = None))]
    fn train(py: Python<'_>, dataset: &PyDataset, fold: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg: TrainConfig = from_json(config)?;
        let out = py.detach(|| run_train(&dataset.inner, fold, &cfg)).map_err(py_err)?;
        Ok(Self {
            inner: out.model,
            losses: out.losses,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, dataset: &PyDataset) -> PyResult<Self> {
        let ds = &dataset.inner;
        Ok(Self {
            inner: load_checkpoint(&path, ds.histology_dim(), &ds.grouping).map_err(py_err)?,
            losses: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, fold: usize) -> PyResult<Bound<'py, PyDict>> {
        let report = py
            .detach(|| evaluate(&self.inner, &dataset.inner, fold))
            .map_err(py_err)?;
        report_dict(py, &report)
    }

    /// Per-bin hazards for one patient by index.
    fn hazards(&self, dataset: &PyDataset, index: usize) -> PyResult<Vec<f64>> {
        let record = dataset
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("patient index {index} out of range")))?;
        Ok(self.inner.predict(record).map_err(py_err)?.hazards)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(enumerated params, closed-form params, FLOPs)` for the given region sizes.
    fn complexity(&self, region_sizes: Vec<usize>) -> (usize, usize, u64) {
        let r = report_complexity(&self.inner, &region_sizes);
        (r.param_count, r.audit.total(), r.flops.total())
    }
}

#[pymodule]
fn survmamba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(concordance_index, m)?)?;
    m.add_function(wrap_pyfunction!(kaplan_meier, m)?)?;
    m.add_function(wrap_pyfunction!(logrank_test, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_sf, m)?)?;
    m.add_function(wrap_pyfunction!(survival_nll, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(scan_bench, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
