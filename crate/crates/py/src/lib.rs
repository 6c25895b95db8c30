//! Python bindings. Configurations and reports cross the boundary as JSON
//! text; tensors and clips are wrapped as classes.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tyrppg::losses::{self, KernelConfig, LossWeights};
use tyrppg::model::{forward_clip, ModelConfig, TyrppgParams};
use tyrppg::preprocess::{self, DIFF_EPS};
use tyrppg::signal::{self, HrBinGrid, HrDistribution, MetricsReport};
use tyrppg::train::{self as tr, Checkpoint, EvalOptions, SynthConfig, TrainConfig};
use tyrppg::{gradsuite, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::NoTape | Error::BackwardTwice => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for tyrppg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Parses an optional JSON object into a config, starting from defaults.
fn config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Dense `f64` tensor with reverse-mode gradients.
#[pyclass(name = "Tensor", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: tyrppg::Tensor,
}

fn wrap(t: tyrppg::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = tyrppg::Tensor::new(&shape, data).py()?;
        Ok(wrap(if requires_grad { t.requires_grad_(true) } else { t }))
    }

    #[staticmethod]
    fn scalar(value: f64) -> Self {
        wrap(tyrppg::Tensor::scalar(value))
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        wrap(tyrppg::Tensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// Row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        if self.inner.numel() != 1 {
            return Err(PyValueError::new_err(format!("item() needs one element, have {}", self.inner.numel())));
        }
        Ok(self.inner.item())
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().py()
    }

    fn detach(&self) -> Self {
        wrap(self.inner.detach())
    }

    fn __add__(&self, o: &PyTensor) -> PyResult<Self> {
        self.inner.add(&o.inner).py().map(wrap)
    }

    fn __sub__(&self, o: &PyTensor) -> PyResult<Self> {
        self.inner.sub(&o.inner).py().map(wrap)
    }

    fn __mul__(&self, o: &PyTensor) -> PyResult<Self> {
        self.inner.mul(&o.inner).py().map(wrap)
    }

    fn __truediv__(&self, o: &PyTensor) -> PyResult<Self> {
        self.inner.div(&o.inner).py().map(wrap)
    }

    fn __neg__(&self) -> Self {
        wrap(self.inner.neg())
    }

    fn __matmul__(&self, o: &PyTensor) -> PyResult<Self> {
        self.inner.matmul(&o.inner).py().map(wrap)
    }

    fn scale(&self, c: f64) -> Self {
        wrap(self.inner.scale(c))
    }

    fn add_scalar(&self, c: f64) -> Self {
        wrap(self.inner.add_scalar(c))
    }

    fn sigmoid(&self) -> Self {
        wrap(self.inner.sigmoid())
    }

    fn tanh(&self) -> Self {
        wrap(self.inner.tanh())
    }

    fn exp(&self) -> Self {
        wrap(self.inner.exp())
    }

    fn ln(&self) -> Self {
        wrap(self.inner.ln())
    }

    fn sqrt(&self) -> Self {
        wrap(self.inner.sqrt())
    }

    /// Sum over `axes`, or over everything when omitted.
    #[pyo3(signature = (axes = None))]
    fn sum(&self, axes: Option<Vec<usize>>) -> PyResult<Self> {
        match axes {
            None => Ok(wrap(self.inner.sum_all())),
            Some(a) => self.inner.sum(&a).py().map(wrap),
        }
    }

    #[pyo3(signature = (axes = None))]
    fn mean(&self, axes: Option<Vec<usize>>) -> PyResult<Self> {
        match axes {
            None => Ok(wrap(self.inner.mean_all())),
            Some(a) => self.inner.mean(&a).py().map(wrap),
        }
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.inner.reshape(&shape).py().map(wrap)
    }

    fn permute(&self, axes: Vec<usize>) -> PyResult<Self> {
        self.inner.permute(&axes).py().map(wrap)
    }

    fn shift(&self, axis: usize, offset: isize) -> PyResult<Self> {
        self.inner.shift(axis, offset).py().map(wrap)
    }

    fn softmax(&self, axis: usize) -> PyResult<Self> {
        self.inner.softmax(axis).py().map(wrap)
    }

    fn log_softmax(&self, axis: usize) -> PyResult<Self> {
        self.inner.log_softmax(axis).py().map(wrap)
    }

    #[pyo3(signature = (axis, eps = 1e-5, gamma = None, beta = None))]
    fn layer_norm(&self, axis: usize, eps: f64, gamma: Option<&PyTensor>, beta: Option<&PyTensor>) -> PyResult<Self> {
        self.inner
            .layer_norm(axis, eps, gamma.map(|g| &g.inner), beta.map(|b| &b.inner))
            .py()
            .map(wrap)
    }

    /// Contracts the leading axis with `weight` of shape `[out, in]`.
    #[pyo3(signature = (weight, bias = None))]
    fn linear(&self, weight: &PyTensor, bias: Option<&PyTensor>) -> PyResult<Self> {
        self.inner.linear(&weight.inner, bias.map(|b| &b.inner)).py().map(wrap)
    }

    /// Same-padded 3-D convolution of a `[C, T, H, W]` map.
    #[pyo3(signature = (kernel, bias = None))]
    fn conv3d(&self, kernel: &PyTensor, bias: Option<&PyTensor>) -> PyResult<Self> {
        self.inner.conv3d(&kernel.inner, bias.map(|b| &b.inner)).py().map(wrap)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.inner.shape(), self.inner.requires_grad())
    }
}

/// `(T, C, H, W)` frames with sampling rate and optional labels.
#[pyclass(name = "VideoClip", unsendable, skip_from_py_object)]
#[derive(Clone)]
pub struct PyVideoClip {
    pub inner: preprocess::VideoClip,
}

#[pymethods]
impl PyVideoClip {
    #[new]
    #[pyo3(signature = (frames, fs, gt_bvp = None, gt_hr_bpm = None))]
    fn new(frames: &PyTensor, fs: f64, gt_bvp: Option<Vec<f64>>, gt_hr_bpm: Option<f64>) -> PyResult<Self> {
        let inner = preprocess::VideoClip::new(frames.inner.detach(), fs, gt_bvp, gt_hr_bpm).py()?;
        Ok(PyVideoClip { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVideoClip {
            inner: preprocess::read_clip(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        preprocess::write_clip(path, &self.inner).py()
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn fs(&self) -> f64 {
        self.inner.fs
    }

    #[getter]
    fn frames(&self) -> PyTensor {
        wrap(self.inner.frames.clone())
    }

    #[getter]
    fn gt_bvp(&self) -> Option<Vec<f64>> {
        self.inner.gt_bvp.clone()
    }

    #[getter]
    fn gt_hr_bpm(&self) -> Option<f64> {
        self.inner.gt_hr_bpm
    }

    fn __repr__(&self) -> String {
        let (t, c, h, w) = self.inner.dims();
        format!("VideoClip(T={t}, C={c}, H={h}, W={w}, fs={})", self.inner.fs)
    }
}

/// Model parameters plus the seed and epoch they came from.
#[pyclass(name = "Model", unsendable)]
pub struct PyModel {
    pub ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Fresh seeded initialization; `config` is a JSON model config.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = self::config(config)?;
        Ok(PyModel {
            ckpt: Checkpoint {
                params: TyrppgParams::init(&cfg, seed).py()?,
                seed,
                epoch: 0,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            ckpt: Checkpoint::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(path).py()
    }

    fn param_count(&self) -> usize {
        self.ckpt.params.param_count()
    }

    fn config(&self) -> PyResult<String> {
        to_json(&self.ckpt.params.cfg)
    }

    /// Returns `(bvp, hr_logits, mask)` without recording gradients.
    fn forward(&self, clip: &PyVideoClip) -> PyResult<(PyTensor, PyTensor, PyTensor)> {
        let out = tyrppg::no_grad(|| forward_clip(&clip.inner, &self.ckpt.params)).py()?;
        Ok((wrap(out.bvp), wrap(out.logits), wrap(out.mask)))
    }

    /// Heart rate in bpm read out from the predicted BVP.
    fn estimate_hr(&self, clip: &PyVideoClip) -> PyResult<f64> {
        let out = tyrppg::no_grad(|| forward_clip(&clip.inner, &self.ckpt.params)).py()?;
        tr::readout_hr(&out.bvp.to_vec(), clip.inner.fs, &self.ckpt.params.cfg.grid).py()
    }

    /// Evaluation report as JSON; `options` is a JSON `EvalOptions`.
    #[pyo3(signature = (clips, options = None))]
    fn evaluate(&self, clips: Vec<PyRef<PyVideoClip>>, options: Option<&str>) -> PyResult<String> {
        let opts: EvalOptions = config(options)?;
        let clips: Vec<_> = clips.iter().map(|c| c.inner.clone()).collect();
        to_json(&tr::evaluate(&self.ckpt.params, &clips, &opts).py()?)
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, seed={}, epoch={})", self.param_count(), self.ckpt.seed, self.ckpt.epoch)
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae_bpm", m.mae_bpm)?;
    d.set_item("rmse_bpm", m.rmse_bpm)?;
    d.set_item("pearson_rho", m.pearson_rho)?;
    d.set_item("degenerate", m.degenerate)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (clip, eps = DIFF_EPS))]
fn normalized_frame_diff(clip: &PyVideoClip, eps: f64) -> PyResult<PyTensor> {
    preprocess::normalized_frame_diff(&clip.inner, eps).py().map(wrap)
}

#[pyfunction]
fn standardize_appearance(clip: &PyVideoClip) -> PyResult<PyTensor> {
    preprocess::standardize_appearance(&clip.inner).py().map(wrap)
}

/// `(freqs_hz, power)` of the Hann-windowed periodogram.
#[pyfunction]
fn periodogram(x: Vec<f64>, fs: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = signal::periodogram(&x, fs).py()?;
    Ok((p.freqs_hz, p.power))
}

#[pyfunction]
#[pyo3(signature = (x, fs, lo_hz, hi_hz))]
fn bandpass(x: Vec<f64>, fs: f64, lo_hz: f64, hi_hz: f64) -> PyResult<Vec<f64>> {
    signal::bandpass(&x, fs, lo_hz, hi_hz).py()
}

/// Heart rate from a difference-domain BVP over the default band.
#[pyfunction]
fn readout_hr(bvp_diff: Vec<f64>, fs: f64) -> PyResult<f64> {
    tr::readout_hr(&bvp_diff, fs, &HrBinGrid::default()).py()
}

#[pyfunction]
fn metrics<'py>(py: Python<'py>, pred_bpm: Vec<f64>, gt_bpm: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    metrics_dict(py, &signal::metrics(&pred_bpm, &gt_bpm).py()?)
}

fn distributions(p: Vec<f64>, q: Vec<f64>, lo_bpm: f64, step_bpm: f64) -> PyResult<(HrDistribution, HrDistribution)> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PyValueError::new_err(format!("pmfs need equal non-zero length, got {} and {}", p.len(), q.len())));
    }
    let grid = HrBinGrid::new(lo_bpm, lo_bpm + step_bpm * p.len() as f64, step_bpm).py()?;
    Ok((HrDistribution::new(grid, p).py()?, HrDistribution::new(grid, q).py()?))
}

/// Squared MMD between two pmfs on a grid starting at `lo_bpm`.
#[pyfunction]
#[pyo3(signature = (p, q, lo_bpm = 40.0, step_bpm = 1.0, bandwidth_bpm = 3.0))]
fn mmd2(p: Vec<f64>, q: Vec<f64>, lo_bpm: f64, step_bpm: f64, bandwidth_bpm: f64) -> PyResult<f64> {
    let (p, q) = distributions(p, q, lo_bpm, step_bpm)?;
    let k = KernelConfig {
        bandwidth_bpm,
        ..KernelConfig::default()
    };
    losses::mmd2(&p, &q, &k).py()
}

/// `KL(p || q)`; infinite when `q` misses mass of `p`.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    let (p, q) = distributions(p, q, 40.0, 1.0)?;
    losses::kl_divergence(&p, &q).py()
}

#[pyfunction]
fn pearson_loss(pred: &PyTensor, gt: &PyTensor) -> PyResult<PyTensor> {
    losses::pearson_loss(&pred.inner, &gt.inner).py().map(wrap)
}

#[pyfunction]
#[pyo3(signature = (c, p, w, alpha = 1.0, beta = 1.0, gamma = 1.0))]
fn csl(c: &PyTensor, p: &PyTensor, w: &PyTensor, alpha: f64, beta: f64, gamma: f64) -> PyResult<PyTensor> {
    let weights = LossWeights { alpha, beta, gamma };
    losses::csl(&c.inner, &p.inner, &w.inner, &weights).py().map(wrap)
}

#[pyfunction]
#[pyo3(signature = (p, w, beta = 1.0, gamma = 1.0))]
fn wsl(p: &PyTensor, w: &PyTensor, beta: f64, gamma: f64) -> PyResult<PyTensor> {
    let weights = LossWeights { alpha: 0.0, beta, gamma };
    losses::wsl(&p.inner, &w.inner, &weights).py().map(wrap)
}

/// Synthetic clips; `config` is a JSON synth config.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn synth_dataset(config: Option<&str>) -> PyResult<Vec<PyVideoClip>> {
    let cfg: SynthConfig = self::config(config)?;
    let clips = tr::synth_dataset(&cfg, &HrBinGrid::default()).py()?;
    Ok(clips.into_iter().map(|inner| PyVideoClip { inner }).collect())
}

#[pyfunction]
fn read_dataset(dir: PathBuf) -> PyResult<Vec<PyVideoClip>> {
    Ok(tr::read_dataset(dir).py()?.into_iter().map(|inner| PyVideoClip { inner }).collect())
}

#[pyfunction]
fn write_dataset(dir: PathBuf, clips: Vec<PyRef<PyVideoClip>>) -> PyResult<()> {
    let clips: Vec<_> = clips.iter().map(|c| c.inner.clone()).collect();
    tr::write_dataset(dir, &clips, None).py()
}

/// Trains a model; returns it with the run report as JSON.
#[pyfunction]
#[pyo3(signature = (clips, model_config = None, train_config = None))]
fn train(clips: Vec<PyRef<PyVideoClip>>, model_config: Option<&str>, train_config: Option<&str>) -> PyResult<(PyModel, String)> {
    let m: ModelConfig = config(model_config)?;
    let t: TrainConfig = config(train_config)?;
    m.validate().py()?;
    t.validate().py()?;
    let clips: Vec<_> = clips.iter().map(|c| c.inner.clone()).collect();
    let out = tr::train(&clips, &m, &t).py()?;
    let report = out.report.to_json().py()?;
    Ok((PyModel { ckpt: out.checkpoint }, report))
}

/// Runs the gradient verification suite; returns `(all_passed, table)`.
#[pyfunction]
#[pyo3(signature = (seeds = gradsuite::DEFAULT_SEEDS, filter = None))]
fn grad_check(seeds: usize, filter: Option<&str>) -> PyResult<(bool, String)> {
    let r = gradsuite::run_suite(seeds, filter).py()?;
    Ok((r.all_passed(), r.table()))
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVideoClip>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalized_frame_diff, m)?)?;
    m.add_function(wrap_pyfunction!(standardize_appearance, m)?)?;
    m.add_function(wrap_pyfunction!(periodogram, m)?)?;
    m.add_function(wrap_pyfunction!(bandpass, m)?)?;
    m.add_function(wrap_pyfunction!(readout_hr, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_loss, m)?)?;
    m.add_function(wrap_pyfunction!(csl, m)?)?;
    m.add_function(wrap_pyfunction!(wsl, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[pymodule]
fn tyrppg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
