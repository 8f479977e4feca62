//! Python bindings. Configs and reports cross the boundary as plain dicts,
//! converted through their JSON forms, so every config key accepted by the
//! Rust API is accepted here with the same defaults.

use std::path::PathBuf;

use msct_core::baselines::{fit_iptw_msm, MsmConfig, MsmModel};
use msct_core::dgp::{build_benchmark, load_records, save_benchmark, sliding_strategies, Benchmark, DgpConfig, SplitSizes, UnitRecord, SPLITS};
use msct_core::eval::{self, EffectRecord, EvalOptions, Persistence};
use msct_core::ingest::{ingest_file, save_ingested, IngestConfig, INGEST_META};
use msct_core::model::{load_checkpoint, save_checkpoint, sequences, MsctConfig, MsctModel, RolloutRequest, Sequence, TreatmentField};
use msct_core::training::{train_msct, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(msct, MsctError, PyValueError, "Raised for any error reported by the Rust library.");

fn err(e: msct_core::MsctError) -> PyErr {
    MsctError::new_err(e.to_string())
}

/// `None` means the type's defaults.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| MsctError::new_err(format!("invalid config: {e}")))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MsctError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Train, validation and test units, synthetic or ingested.
#[pyclass(name = "Benchmark", module = "msct")]
struct PyBenchmark {
    meta: serde_json::Value,
    splits: [Vec<UnitRecord>; 3],
}

impl PyBenchmark {
    fn split(&self, name: &str) -> PyResult<&[UnitRecord]> {
        SPLITS
            .iter()
            .position(|s| *s == name)
            .map(|i| self.splits[i].as_slice())
            .ok_or_else(|| PyValueError::new_err(format!("unknown split {name:?}; expected train, val or test")))
    }

    fn sequences(&self, name: &str, cfg: &MsctConfig) -> PyResult<Vec<Sequence>> {
        sequences(self.split(name)?, cfg.treatment_field, cfg.k).map_err(err)
    }

    fn from_bench(b: Benchmark) -> PyResult<Self> {
        Ok(PyBenchmark {
            meta: serde_json::to_value(&b.meta).map_err(|e| MsctError::new_err(e.to_string()))?,
            splits: [b.train, b.val, b.test],
        })
    }
}

#[pymethods]
impl PyBenchmark {
    /// Simulate a benchmark. `dgp` and `sizes` are dicts of overrides.
    #[staticmethod]
    #[pyo3(signature = (dgp=None, sizes=None))]
    fn generate(py: Python<'_>, dgp: Option<&Bound<'_, PyAny>>, sizes: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: DgpConfig = from_py(py, dgp)?;
        let sizes: SplitSizes = from_py(py, sizes)?;
        cfg.validate().map_err(err)?;
        let b = py.detach(|| build_benchmark(&cfg, sizes)).map_err(err)?;
        Self::from_bench(b)
    }

    /// Load a directory written by `save`, `msct generate` or `msct ingest`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let meta_path = [path.join("config.json"), path.join(INGEST_META)]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| MsctError::new_err(format!("{} holds no dataset metadata", path.display())))?;
        let text = std::fs::read_to_string(&meta_path).map_err(|e| MsctError::new_err(format!("{}: {e}", meta_path.display())))?;
        let meta = serde_json::from_str(&text).map_err(|e| MsctError::new_err(format!("{}: {e}", meta_path.display())))?;
        let mut splits = SPLITS
            .iter()
            .map(|n| load_records(&path.join(format!("{n}.jsonl"))))
            .collect::<msct_core::Result<Vec<_>>>()
            .map_err(err)?;
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(PyBenchmark {
            meta,
            splits: [train, val, test],
        })
    }

    /// Only synthetic benchmarks can be saved from Python.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = serde_json::from_value(self.meta.clone())
            .map_err(|_| MsctError::new_err("only synthetic benchmarks can be saved; ingested data is already on disk"))?;
        let [train, val, test] = self.splits.clone();
        save_benchmark(&Benchmark { meta, train, val, test }, &path).map_err(err)
    }

    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.meta)
    }

    fn __len__(&self) -> usize {
        self.splits.iter().map(Vec::len).sum()
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// One unit as a dict with keys x, t, t_type, y, s and cf.
    fn unit<'py>(&self, py: Python<'py>, split: &str, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let recs = self.split(split)?;
        let r = recs
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("unit {index} out of range for {} units", recs.len())))?;
        to_py(py, r)
    }

    fn __repr__(&self) -> String {
        format!(
            "Benchmark(train={}, val={}, test={})",
            self.splits[0].len(),
            self.splits[1].len(),
            self.splits[2].len()
        )
    }
}

#[pyclass(name = "Model", module = "msct")]
struct PyModel {
    inner: MsctModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyAny>>, seed: u64) -> PyResult<Self> {
        let cfg: MsctConfig = from_py(py, config)?;
        Ok(PyModel {
            inner: MsctModel::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[pyo3(signature = (path, train_config_hash="", epochs=vec![]))]
    fn save(&self, path: PathBuf, train_config_hash: &str, epochs: Vec<usize>) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, train_config_hash, &epochs).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.cfg)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.store.num_scalars()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.store.ids().map(|id| self.inner.store.name(id).to_string()).collect()
    }

    /// Full training procedure on the benchmark's train and val splits.
    /// Returns the per-epoch log of both stages.
    #[pyo3(signature = (bench, train=None))]
    fn fit<'py>(&mut self, py: Python<'py>, bench: &PyBenchmark, train: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
        let tc: TrainConfig = from_py(py, train)?;
        let tr = bench.sequences("train", &self.inner.cfg)?;
        let va = bench.sequences("val", &self.inner.cfg)?;
        let model = &mut self.inner;
        let report = py.detach(|| train_msct(model, &tr, &va, &tc)).map_err(err)?;
        to_py(py, &report)
    }

    /// Outcomes at horizons 1..=len(treatments)+1 after `anchor`, with the
    /// given crash indicators (or classes) fed for the first steps.
    fn forecast(&self, bench: &PyBenchmark, split: &str, unit: usize, anchor: usize, treatments: Vec<u8>) -> PyResult<Vec<f64>> {
        let recs = bench.split(split)?;
        let rec = recs
            .get(unit)
            .ok_or_else(|| PyValueError::new_err(format!("unit {unit} out of range for {} units", recs.len())))?;
        let seq = sequences(std::slice::from_ref(rec), self.inner.cfg.treatment_field, self.inner.cfg.k)
            .map_err(err)?
            .remove(0);
        let cache = self.inner.encode_all(&[&seq]).map_err(err)?.remove(0);
        let req = RolloutRequest {
            seq: &seq,
            cache: &cache,
            anchor,
            treatments: &treatments,
        };
        Ok(self.inner.rollout(&[req]).map_err(err)?.remove(0))
    }

    /// Predicted path for every sliding-crash strategy, keyed by label.
    fn counterfactuals<'py>(&self, py: Python<'py>, bench: &PyBenchmark, split: &str, unit: usize, anchor: usize) -> PyResult<Bound<'py, PyAny>> {
        let seqs = bench.sequences(split, &self.inner.cfg)?;
        let seq = seqs
            .get(unit)
            .ok_or_else(|| PyValueError::new_err(format!("unit {unit} out of range for {} units", seqs.len())))?;
        let paths = self
            .inner
            .predict_counterfactual(seq, anchor, &sliding_strategies(self.inner.cfg.tau_max))
            .map_err(err)?;
        let map: std::collections::BTreeMap<_, _> = paths.labels.into_iter().zip(paths.paths).collect();
        to_py(py, &map)
    }

    /// Per-horizon RMSE and CRMSE on one split.
    #[pyo3(signature = (bench, split="test", options=None))]
    fn evaluate<'py>(&self, py: Python<'py>, bench: &PyBenchmark, split: &str, options: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
        let opts: EvalOptions = from_py(py, options)?;
        let recs = bench.split(split)?;
        let model = &self.inner;
        let e = py.detach(|| eval::evaluate("msct", model, recs, &model.cfg, &opts)).map_err(err)?;
        to_py(py, &e)
    }

    fn __repr__(&self) -> String {
        format!("Model(backbone={:?}, d_h={}, params={})", self.inner.cfg.backbone, self.inner.cfg.d_h, self.inner.store.num_scalars())
    }
}

/// Inverse-probability-weighted marginal structural model.
#[pyclass(name = "Msm", module = "msct")]
struct PyMsm {
    inner: MsmModel,
    sw_mean: Vec<f64>,
}

#[pymethods]
impl PyMsm {
    /// Fit propensities, stabilized weights and the weighted regressions on
    /// the training split.
    #[staticmethod]
    #[pyo3(signature = (bench, config=None))]
    fn fit(py: Python<'_>, bench: &PyBenchmark, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg: MsmConfig = from_py(py, config)?;
        let seqs = sequences(bench.split("train")?, TreatmentField::Binary, 2).map_err(err)?;
        let fit = py.detach(|| fit_iptw_msm(&seqs, &cfg)).map_err(err)?;
        Ok(PyMsm {
            sw_mean: fit.weights.iter().map(|w| w.mean).collect(),
            inner: fit.msm,
        })
    }

    /// Coefficients and weight diagnostics, one dict per horizon.
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text = self.inner.to_json().map_err(err)?;
        py.import("json")?.call_method1("loads", (text,))
    }

    /// Mean stabilized weight per horizon, after capping.
    #[getter]
    fn sw_mean(&self) -> Vec<f64> {
        self.sw_mean.clone()
    }

    fn predict(&self, s: Vec<f64>, history: Vec<u8>, treatments: Vec<u8>) -> PyResult<Vec<f64>> {
        self.inner.predict(&s, &history, &treatments).map_err(err)
    }

    #[pyo3(signature = (bench, split="test", options=None, model=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        bench: &PyBenchmark,
        split: &str,
        options: Option<&Bound<'py, PyAny>>,
        model: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts: EvalOptions = from_py(py, options)?;
        let mc: MsctConfig = from_py(py, model)?;
        let e = eval::evaluate("msm", &self.inner, bench.split(split)?, &mc, &opts).map_err(err)?;
        to_py(py, &e)
    }
}

/// Scores the persistence forecast (last observed speed repeated).
#[pyfunction]
#[pyo3(signature = (bench, split="test", options=None, model=None))]
fn evaluate_persistence<'py>(
    py: Python<'py>,
    bench: &PyBenchmark,
    split: &str,
    options: Option<&Bound<'py, PyAny>>,
    model: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts: EvalOptions = from_py(py, options)?;
    let mc: MsctConfig = from_py(py, model)?;
    let e = eval::evaluate("naive", &Persistence, bench.split(split)?, &mc, &opts).map_err(err)?;
    to_py(py, &e)
}

/// RMSE per horizon over possibly ragged paths; `None` where no path reaches.
#[pyfunction]
fn rmse_per_horizon(preds: Vec<Vec<f64>>, truths: Vec<Vec<f64>>, horizons: usize) -> PyResult<Vec<Option<f64>>> {
    eval::rmse_per_horizon(&preds, &truths, horizons).map_err(err)
}

/// CRMSE from `(true_crash, true_zero, pred_crash, pred_zero)` tuples; any
/// entry may be `None`, which skips the record.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn crmse<'py>(
    py: Python<'py>,
    records: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)>,
    horizons: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let recs: Vec<EffectRecord> = records
        .into_iter()
        .map(|(true_crash, true_zero, pred_crash, pred_zero)| EffectRecord {
            true_crash,
            true_zero,
            pred_crash,
            pred_zero,
        })
        .collect();
    to_py(py, &eval::crmse(&recs, horizons).map_err(err)?)
}

/// Labels and treatment vectors of the sliding-crash strategy set.
#[pyfunction]
fn strategies(tau_max: usize) -> Vec<(String, Vec<u8>)> {
    sliding_strategies(tau_max).into_iter().map(|s| (s.label, s.treatments)).collect()
}

/// Window a detector CSV and write the dataset to `out_dir`; returns its metadata.
#[pyfunction]
#[pyo3(signature = (csv_path, out_dir, config=None))]
fn ingest_csv<'py>(py: Python<'py>, csv_path: PathBuf, out_dir: PathBuf, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: IngestConfig = from_py(py, config)?;
    cfg.validate().map_err(err)?;
    let ds = ingest_file(&csv_path, &cfg).map_err(err)?;
    save_ingested(&ds, &out_dir).map_err(err)?;
    to_py(py, &ds.meta)
}

#[pymodule]
fn msct(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MsctError", m.py().get_type::<MsctError>())?;
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyMsm>()?;
    m.add_function(wrap_pyfunction!(evaluate_persistence, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_per_horizon, m)?)?;
    m.add_function(wrap_pyfunction!(crmse, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_csv, m)?)?;
    Ok(())
}
