//! Python bindings for `qdiff`.
//!
//! Point sets cross the boundary as lists of `[x, y]` pairs. Errors raise
//! `ValueError` (bad shapes, parameters, configs), `OSError` (file access)
//! or `RuntimeError` (everything else), with the toolkit's message.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qdiff::analysis::{self, CurveMode};
use qdiff::diffusion::{Denoiser, SamplerPlan};
use qdiff::io::config::RunConfig;
use qdiff::io::serialize::{self, AnyModel};
use qdiff::netcore::{NoisePredictor, Tensor};
use qdiff::quant::{self, QuantizerParams};
use qdiff::{run, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        "shape" | "param" | "config" | "csv" => PyValueError::new_err(msg),
        "io" => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn points(rows: &[[f32; 2]]) -> Tensor<f32> {
    Tensor::new(
        vec![rows.len(), 2],
        rows.iter().flatten().copied().collect(),
    )
    .expect("rows are pairs")
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Run configuration. Keys are the ones of the `key=value` config files.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// `Config({"bits_w": 4, "calib.iters": 200})`; unset keys take their
    /// defaults.
    #[new]
    #[pyo3(signature = (values=None))]
    fn new(values: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut text = String::new();
        for (k, v) in values.unwrap_or_default() {
            text.push_str(&format!("{k}={}\n", v.str()?));
        }
        Ok(PyConfig {
            inner: RunConfig::parse(&text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::parse(text).map_err(py_err)?,
        })
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    /// Size `N` of the uniform-interval calibration set.
    #[getter]
    fn calibration_size(&self) -> usize {
        self.inner.derived_n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(bits_w={}, bits_a={}, T_sample={}, calib.c={}, calib.n={})",
            self.inner.quant.bits_w,
            self.inner.quant.bits_a,
            self.inner.t_sample,
            self.inner.calib_c,
            self.inner.calib_n
        )
    }
}

/// Full-precision noise predictor.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: NoisePredictor<f32>,
}

#[pymethods]
impl PyModel {
    /// Trains a fresh model; returns it with the per-step loss curve.
    #[staticmethod]
    fn train(config: &PyConfig, seed: u64) -> PyResult<(PyModel, Vec<f64>)> {
        let rep = run::train_model(&config.inner, seed).map_err(py_err)?;
        Ok((PyModel { inner: rep.model }, rep.losses))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: serialize::load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        serialize::save_model(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layers().iter().map(|l| l.name.clone()).collect()
    }

    /// Predicted noise for each point at timestep `t`.
    fn predict(&self, x: Vec<[f32; 2]>, t: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(to_rows(
            &self.inner.predict(&points(&x), t).map_err(py_err)?,
        ))
    }

    fn sample(&self, config: &PyConfig, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        sample_any(&self.inner, config, seed)
    }
}

/// Quantized model produced by calibration.
#[pyclass(name = "QuantizedModel", from_py_object)]
#[derive(Clone)]
struct PyQuantized {
    inner: quant::QuantizedModel,
}

#[pymethods]
impl PyQuantized {
    /// Quantizes and calibrates `model` following the config's quantization
    /// and `calib.*` keys.
    #[staticmethod]
    fn calibrate(model: &PyModel, config: &PyConfig, seed: u64) -> PyResult<Self> {
        let c = run::calibrate_model(&model.inner, &config.inner, seed).map_err(py_err)?;
        Ok(PyQuantized { inner: c.model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyQuantized {
            inner: serialize::load_quantized(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        serialize::save_quantized(&path, &self.inner).map_err(py_err)
    }

    fn predict(&self, x: Vec<[f32; 2]>, t: usize) -> PyResult<Vec<Vec<f32>>> {
        Ok(to_rows(
            &self.inner.predict(&points(&x), t).map_err(py_err)?,
        ))
    }

    fn sample(&self, config: &PyConfig, seed: u64) -> PyResult<Vec<Vec<f32>>> {
        sample_any(&self.inner, config, seed)
    }

    /// Closed-loop (default) or open-loop error curve against `fp`, as
    /// `(timesteps, mse)`.
    #[pyo3(signature = (fp, config, seed, mode="closed-loop"))]
    fn error_curve(
        &self,
        fp: &PyModel,
        config: &PyConfig,
        seed: u64,
        mode: &str,
    ) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let mode: CurveMode = mode.parse().map_err(py_err)?;
        let c =
            run::error_curve(&fp.inner, &self.inner, &config.inner, seed, mode).map_err(py_err)?;
        Ok((c.t, c.mse))
    }
}

fn sample_any<D: Denoiser>(m: &D, config: &PyConfig, seed: u64) -> PyResult<Vec<Vec<f32>>> {
    let traj = run::sample_model(m, &config.inner, seed, false).map_err(py_err)?;
    Ok(to_rows(&traj.final_sample))
}

/// Kind stored in a checkpoint: `"model"` or `"quantized"`.
#[pyfunction]
fn checkpoint_kind(path: PathBuf) -> PyResult<&'static str> {
    Ok(match serialize::load_any(&path).map_err(py_err)? {
        AnyModel::Fp(_) => "model",
        AnyModel::Quantized(_) => "quantized",
    })
}

/// Symmetric fake quantization of `values` with one scale.
#[pyfunction]
fn quantize_dequantize(values: Vec<f32>, scale: f32, bits: u32) -> PyResult<Vec<f32>> {
    let p = QuantizerParams::symmetric(bits, vec![scale]).map_err(py_err)?;
    let n = values.len();
    let t = Tensor::new(vec![1, n], values).map_err(py_err)?;
    Ok(quant::quantize_dequantize(&t, &p)
        .map_err(py_err)?
        .into_data())
}

#[pyfunction]
fn energy_distance(a: Vec<[f32; 2]>, b: Vec<[f32; 2]>) -> PyResult<f64> {
    analysis::energy_distance(&points(&a), &points(&b)).map_err(py_err)
}

/// Fraction of `samples` nearest to each mode of the config's dataset.
#[pyfunction]
fn mode_coverage(samples: Vec<[f32; 2]>, config: &PyConfig) -> PyResult<Vec<f64>> {
    analysis::mode_coverage(&points(&samples), &config.inner.dataset.modes()).map_err(py_err)
}

/// Fresh draws from the config's dataset.
#[pyfunction]
fn reference_points(config: &PyConfig, seed: u64) -> Vec<Vec<f32>> {
    to_rows(&run::reference_points(&config.inner, seed))
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("sequences differ in length"));
    }
    Ok(analysis::spearman(&a, &b))
}

/// Timesteps of the uniform DDIM plan, noise end first.
#[pyfunction]
fn sampler_steps(t_train: usize, t_sample: usize) -> PyResult<Vec<usize>> {
    Ok(SamplerPlan::uniform(t_train, t_sample, 0.0)
        .map_err(py_err)?
        .steps()
        .to_vec())
}

#[pymodule]
fn qdiffpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyQuantized>()?;
    m.add_function(wrap_pyfunction!(checkpoint_kind, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(energy_distance, m)?)?;
    m.add_function(wrap_pyfunction!(mode_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(reference_points, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(sampler_steps, m)?)?;
    Ok(())
}
