//! Python module `vidflow`: tensors, warping, metrics, losses, synthetic
//! data, training and inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vidflow::config::{KlReduction, RunConfig};
use vidflow::data::{FlowVolume, FrameSequence, LabelMap, OcclusionVolume, Palette, Sample};
use vidflow::error::Error;
use vidflow::pipeline::{self, ColorizeBaseline, Model, TrainOptions};
use vidflow::synthgen::{generate_samples, DatasetSpec};
use vidflow::tensor::Tensor;
use vidflow::{io, losses, metrics, viz, warp};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingFile(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense float32 array with a shape, stored row-major.
#[pyclass(name = "Tensor", module = "vidflow", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: Tensor<f32>,
}

impl From<Tensor<f32>> for PyTensor {
    fn from(inner: Tensor<f32>) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor::from_vec(&shape, data).map_err(err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor::zeros(&shape).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn mean(&self) -> f32 {
        self.inner.mean()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        if self.inner.shape() != other.inner.shape() {
            return Err(PyValueError::new_err("shape mismatch"));
        }
        Ok(self.inner.max_abs_diff(&other.inner))
    }

    /// Sub-tensor along the first axis.
    fn index(&self, i: usize) -> PyResult<Self> {
        if i >= self.inner.dim(0) {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.index0(i).into())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Run configuration; keys as in the text config format.
#[pyclass(name = "Config", module = "vidflow", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_text(text).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        vidflow::config::KEYS.to_vec()
    }
}

/// One synthetic video with its ground truth.
#[pyclass(name = "Sample", module = "vidflow", from_py_object)]
#[derive(Clone)]
pub struct PySample {
    pub inner: Sample,
}

#[pymethods]
impl PySample {
    /// `[T+1, 3, H, W]`.
    #[getter]
    fn frames(&self) -> PyTensor {
        self.inner.frames.tensor().clone().into()
    }

    #[getter]
    fn flow_fwd(&self) -> PyTensor {
        self.inner.flows.forward.clone().into()
    }

    #[getter]
    fn flow_bwd(&self) -> PyTensor {
        self.inner.flows.backward.clone().into()
    }

    #[getter]
    fn occ_fwd(&self) -> PyTensor {
        self.inner.occlusions.forward.clone().into()
    }

    #[getter]
    fn occ_bwd(&self) -> PyTensor {
        self.inner.occlusions.backward.clone().into()
    }

    /// Class ids of the frame-0 label map, row-major.
    #[getter]
    fn label(&self) -> Vec<u8> {
        self.inner.label.classes().to_vec()
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        io::save_sample(&dir, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_sample(&dir).map_err(err)?,
        })
    }
}

/// Trained or freshly initialised network.
#[pyclass(name = "Model", module = "vidflow")]
pub struct PyModel {
    pub inner: Model,
}

fn label_for(model: &Model, classes: Option<Vec<u8>>) -> PyResult<Option<LabelMap>> {
    let c = &model.config;
    classes
        .map(|v| LabelMap::new(c.height, c.width, v, c.num_classes, &c.fg_classes).map_err(err))
        .transpose()
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn init(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: Model::init(&config.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::load_model(&checkpoint, None).map_err(err)?,
        })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Prior samples from a first frame `[3, H, W]`; returns `[T+1, 3, H, W]`
    /// sequences.
    #[pyo3(signature = (i0, label=None, n_samples=1, seed=0))]
    fn predict_from_frame(&self, i0: &PyTensor, label: Option<Vec<u8>>, n_samples: usize, seed: u64) -> PyResult<Vec<PyTensor>> {
        let label = label_for(&self.inner, label)?;
        let out = pipeline::predict_from_frame(&self.inner, &i0.inner, label.as_ref(), n_samples, seed).map_err(err)?;
        Ok(out.into_iter().map(|g| g.frames.into_tensor().into()).collect())
    }

    /// Label map through the colourising image stage, then prior samples.
    #[pyo3(signature = (label, n_samples=1, seed=0))]
    fn generate(&self, label: Vec<u8>, n_samples: usize, seed: u64) -> PyResult<Vec<PyTensor>> {
        let label = label_for(&self.inner, Some(label))?.expect("given");
        let i2i = ColorizeBaseline {
            palette: Palette::standard(self.inner.config.num_classes),
        };
        let out = pipeline::generate(&self.inner, &label, &i2i, n_samples, seed).map_err(err)?;
        Ok(out.into_iter().map(|g| g.frames.into_tensor().into()).collect())
    }

    /// Posterior-mean metrics on samples, as a JSON string.
    #[pyo3(signature = (samples, diversity_samples=4, draws=8, seed=0))]
    fn evaluate(&self, samples: Vec<PySample>, diversity_samples: usize, draws: usize, seed: u64) -> PyResult<String> {
        let s: Vec<Sample> = samples.into_iter().map(|s| s.inner).collect();
        let r = metrics::evaluate(&self.inner, &s, diversity_samples, draws, seed).map_err(err)?;
        serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyfunction]
#[pyo3(signature = (family, samples, seed, height=64, width=64, steps=4))]
fn synth_dataset(family: &str, samples: usize, seed: u64, height: usize, width: usize, steps: usize) -> PyResult<Vec<PySample>> {
    let spec = DatasetSpec {
        family: family.parse().map_err(err)?,
        samples,
        seed,
        height,
        width,
        steps,
    };
    Ok(generate_samples(&spec).map_err(err)?.into_iter().map(|inner| PySample { inner }).collect())
}

/// Trains on `samples`, writing logs and checkpoints to `out_dir`;
/// returns the final checkpoint path.
#[pyfunction]
fn train(config: &PyConfig, samples: Vec<PySample>, out_dir: PathBuf) -> PyResult<PathBuf> {
    let s: Vec<Sample> = samples.into_iter().map(|s| s.inner).collect();
    let o = pipeline::train(&config.inner, &s, &out_dir, &TrainOptions::default()).map_err(err)?;
    Ok(o.checkpoint)
}

/// Samples `frame [C, H, W]` at `x + flow(x)`.
#[pyfunction]
fn warp_frame(frame: &PyTensor, flow: &PyTensor) -> PyResult<PyTensor> {
    Ok(warp::warp_frame(&frame.inner, &flow.inner).map_err(err)?.into())
}

/// Samples `image [C, H, W]` at absolute coordinates `[2, H', W']`.
#[pyfunction]
fn bilinear_sample(image: &PyTensor, coords: &PyTensor) -> PyResult<PyTensor> {
    let grid = warp::SamplingGrid::new(coords.inner.clone()).map_err(err)?;
    Ok(warp::bilinear_sample(&image.inner, &grid).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (pred, gt, region=None))]
fn epe(pred: &PyTensor, gt: &PyTensor, region: Option<PyTensor>) -> PyResult<Option<f64>> {
    metrics::epe(&pred.inner, &gt.inner, region.as_ref().map(|r| &r.inner)).map_err(err)
}

#[pyfunction]
fn psnr(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn diversity(samples: Vec<PyTensor>) -> PyResult<f64> {
    let refs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.inner).collect();
    metrics::diversity(&refs).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (flow, max_radius=None))]
fn flow_to_rgb(flow: &PyTensor, max_radius: Option<f32>) -> PyResult<PyTensor> {
    Ok(viz::flow_to_rgb(&flow.inner, max_radius).map_err(err)?.into())
}

fn volumes(flow_fwd: &PyTensor, flow_bwd: &PyTensor, occ_fwd: &PyTensor, occ_bwd: &PyTensor) -> PyResult<(FlowVolume, OcclusionVolume)> {
    Ok((
        FlowVolume::new(flow_fwd.inner.clone(), flow_bwd.inner.clone()).map_err(err)?,
        OcclusionVolume::new(occ_fwd.inner.clone(), occ_bwd.inner.clone()).map_err(err)?,
    ))
}

/// Occlusion-aware bidirectional photometric loss for `frames [T+1, 3, H, W]`.
#[pyfunction]
fn recon_loss(frames: &PyTensor, flow_fwd: &PyTensor, flow_bwd: &PyTensor, occ_fwd: &PyTensor, occ_bwd: &PyTensor) -> PyResult<f64> {
    let seq = FrameSequence::new(frames.inner.clone()).map_err(err)?;
    let (f, o) = volumes(flow_fwd, flow_bwd, occ_fwd, occ_bwd)?;
    losses::eval::recon(&seq, &f, &o).map_err(err)
}

#[pyfunction]
fn consistency_loss(frames: &PyTensor, flow_fwd: &PyTensor, flow_bwd: &PyTensor, occ_fwd: &PyTensor, occ_bwd: &PyTensor) -> PyResult<f64> {
    let seq = FrameSequence::new(frames.inner.clone()).map_err(err)?;
    let (f, o) = volumes(flow_fwd, flow_bwd, occ_fwd, occ_bwd)?;
    losses::eval::consistency(&seq, &f, &o).map_err(err)
}

#[pyfunction]
fn smooth_loss(flow_fwd: &PyTensor, flow_bwd: &PyTensor) -> PyResult<f64> {
    let f = FlowVolume::new(flow_fwd.inner.clone(), flow_bwd.inner.clone()).map_err(err)?;
    Ok(losses::eval::smooth(&f))
}

#[pyfunction]
#[pyo3(signature = (mu, logvar, reduction="sum"))]
fn kl_loss(mu: &PyTensor, logvar: &PyTensor, reduction: &str) -> PyResult<f64> {
    let r: KlReduction = reduction.parse().map_err(err)?;
    losses::eval::kl(&mu.inner, &logvar.inner, r).map_err(err)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(warp_frame, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(epe, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(flow_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(recon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    Ok(())
}

#[pymodule]
#[pyo3(name = "vidflow")]
fn vidflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
