//! Python bindings for the `mcx` toolkit.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mcx::config::{EvalConfig, ExperimentConfig};
use mcx::dataset::{build_dataset, Dataset};
use mcx::features::{stft_features, FeatureConfig};
use mcx::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Index { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::Format { .. } => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_config(path: PathBuf) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&path).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Edit counts of `hyp` against `reference` as a dict.
#[pyfunction]
fn wer(reference: Vec<i64>, hyp: Vec<i64>) -> PyResult<BTreeMap<&'static str, f64>> {
    let c = mcx::eval::wer(&reference, &hyp).map_err(to_py)?;
    Ok(BTreeMap::from([
        ("substitutions", c.substitutions as f64),
        ("deletions", c.deletions as f64),
        ("insertions", c.insertions as f64),
        ("ref_len", c.ref_len as f64),
        ("wer", c.wer()),
    ]))
}

#[pyfunction]
fn werr(wer_a: f64, wer_b: f64) -> PyResult<f64> {
    mcx::eval::werr(wer_a, wer_b).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (d_model, warmup, step, factor = 1.0))]
fn noam_lr(d_model: usize, warmup: usize, step: usize, factor: f64) -> f64 {
    mcx::train::noam_lr(d_model, warmup, step, factor)
}

/// `(total, {block: count})` for the model described by a TOML config.
#[pyfunction]
fn count_parameters(config: PathBuf) -> PyResult<(usize, BTreeMap<String, usize>)> {
    let cfg = load_config(config)?.model_config().map_err(to_py)?;
    let blocks = mcx::model::parameter_breakdown(&cfg)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok((mcx::model::count_parameters(&cfg), blocks))
}

/// Magnitude and phase feature rows for one waveform.
#[pyfunction]
#[pyo3(signature = (wave, sample_rate, frame_ms = 16.0, hop_ms = 10.0, fft_size = 128, stack_left = 2, downsample = 3))]
fn stft(
    wave: Vec<f64>,
    sample_rate: u32,
    frame_ms: f64,
    hop_ms: f64,
    fft_size: usize,
    stack_left: usize,
    downsample: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = FeatureConfig {
        frame_ms,
        hop_ms,
        fft_size,
        stack_left,
        downsample,
    };
    let f = stft_features(&wave, &cfg, sample_rate, "py").map_err(to_py)?;
    let rows = |t: &mcx::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    Ok((rows(&f.mag), rows(&f.pha)))
}

/// Writes a synthetic dataset and returns its metadata as JSON.
#[pyfunction]
fn generate_dataset(config: PathBuf, out: PathBuf) -> PyResult<String> {
    let cfg = load_config(config)?;
    let meta = build_dataset(&cfg, &out).map_err(to_py)?;
    Ok(serde_json::to_string(&meta).expect("meta serialises"))
}

/// A trained or freshly initialised model.
#[pyclass]
struct Model {
    inner: mcx::model::Model,
}

#[pymethods]
impl Model {
    /// Initialises a model from a TOML config with the given seed.
    #[staticmethod]
    fn from_config(config: PathBuf, seed: u64) -> PyResult<Self> {
        let cfg = load_config(config)?.model_config().map_err(to_py)?;
        let inner = mcx::model::Model::new(cfg, seed).map_err(to_py)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = mcx::model::Model::load(&path).map_err(to_py)?;
        Ok(Model { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().num_elements()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serialises")
    }

    /// Decodes a dataset split and returns its WER.
    #[pyo3(signature = (data, split = "test", beam = 1, max_len = 12, length_norm = true))]
    fn evaluate(&self, data: PathBuf, split: &str, beam: usize, max_len: usize, length_norm: bool) -> PyResult<f64> {
        let ds = Dataset::load(&data, split).map_err(to_py)?;
        let cfg = EvalConfig {
            beam,
            length_norm,
            max_len,
        };
        let report = mcx::eval::evaluate(&self.inner, &ds.utterances, &cfg).map_err(to_py)?;
        Ok(report.wer)
    }
}

#[pymodule]
fn mcx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(werr, m)?)?;
    m.add_function(wrap_pyfunction!(noam_lr, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
