//! Python bindings. Images cross the boundary as `(height, width, channels)`
//! plus a flat row-major list of floats.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use defsr::correspond::{match_pyramids, FeatureExtractor, DEFAULT_EXTRACTOR_SEED};
use defsr::metrics::{psnr_y, ssim_y};
use defsr::pipeline::{self, DenoiserChoice, PipelineConfig};

fn err(e: defsr::Error) -> PyErr {
    match e {
        defsr::Error::File { ref source, .. } => PyIOError::new_err(format!("{e}: {source}")),
        defsr::Error::Io(_) => PyIOError::new_err(format!("{e}")),
        other => PyValueError::new_err(format!("{other}")),
    }
}

#[pyclass(name = "Image", module = "defsr", frozen)]
struct PyImage(defsr::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        defsr::Image::from_vec(height, width, channels, data).map(PyImage).map_err(err)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        PyImage(defsr::Image::filled(height, width, channels, value))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        defsr::load_image(path).map(PyImage).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        defsr::save_image(&self.0.clamp01(), path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, row: usize, col: usize, ch: usize) -> PyResult<f64> {
        let (h, w, c) = self.0.dims();
        if row >= h || col >= w || ch >= c {
            return Err(PyValueError::new_err(format!("({row}, {col}, {ch}) outside {h}x{w}x{c}")));
        }
        Ok(self.0.get(row, col, ch))
    }

    fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> PyResult<Self> {
        self.0.crop(row, col, height, width).map(PyImage).map_err(err)
    }

    fn resize(&self, height: usize, width: usize) -> PyResult<Self> {
        defsr::bicubic_resize(&self.0, height, width).map(PyImage).map_err(err)
    }

    fn max_abs_diff(&self, other: &PyImage) -> PyResult<f64> {
        if !self.0.same_shape(&other.0) {
            return Err(PyValueError::new_err("images differ in shape"));
        }
        Ok(self.0.max_abs_diff(&other.0))
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.0.dims();
        format!("Image({h}x{w}x{c})")
    }
}

/// Degradation operator `A` with its pseudo-inverse.
#[pyclass(name = "LinearOperator", module = "defsr", frozen)]
struct PyOperator(defsr::LinearOperator);

#[pymethods]
impl PyOperator {
    /// `kind` is identity, average-pool or bicubic-down; `shape` is the HR size.
    #[new]
    fn new(kind: &str, scale: usize, shape: (usize, usize)) -> PyResult<Self> {
        let kind = kind.parse().map_err(err)?;
        defsr::LinearOperator::build(kind, scale, shape).map(PyOperator).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().name()
    }

    #[getter]
    fn in_shape(&self) -> (usize, usize) {
        self.0.in_shape()
    }

    #[getter]
    fn out_shape(&self) -> (usize, usize) {
        self.0.out_shape()
    }

    fn apply(&self, x: &PyImage) -> PyResult<PyImage> {
        self.0.apply(&x.0).map(PyImage).map_err(err)
    }

    fn pinv(&self, y: &PyImage) -> PyResult<PyImage> {
        self.0.pinv_apply(&y.0).map(PyImage).map_err(err)
    }

    /// Replace the range-space part of `x` with the one `y` dictates.
    fn rectify(&self, x: &PyImage, y: &PyImage) -> PyResult<PyImage> {
        self.0.rectify(&x.0, &y.0).map(PyImage).map_err(err)
    }
}

/// Trained transfer weights (or a zero-residual model when no path is given).
#[pyclass(name = "Model", module = "defsr", frozen)]
struct PyModel(pipeline::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<&str>) -> PyResult<Self> {
        match path {
            Some(p) => pipeline::Model::load(p).map(PyModel).map_err(err),
            None => Ok(PyModel(pipeline::Model::untrained())),
        }
    }
}

fn config(denoiser: &str, steps: usize, seed: u64, tile: usize, def: bool, dcn: bool) -> PyResult<PipelineConfig> {
    Ok(PipelineConfig {
        denoiser: denoiser.parse::<DenoiserChoice>().map_err(err)?,
        steps,
        seed,
        tile,
        def_enabled: def,
        dcn_enabled: dcn,
        ..PipelineConfig::default()
    })
}

/// ×4 detail enhancement of `lr`. `hr` is required by the oracle denoiser.
#[pyfunction]
#[pyo3(signature = (lr, denoiser="gaussian", steps=50, seed=0, tile=64, model=None, hr=None))]
fn enhance(
    lr: &PyImage,
    denoiser: &str,
    steps: usize,
    seed: u64,
    tile: usize,
    model: Option<&PyModel>,
    hr: Option<&PyImage>,
) -> PyResult<PyImage> {
    let cfg = config(denoiser, steps, seed, tile, true, true)?;
    let learned = model.and_then(|m| m.0.denoiser.as_ref());
    pipeline::enhance(&lr.0, &cfg, learned, hr.map(|h| &h.0)).map(PyImage).map_err(err)
}

/// Full pipeline; returns `(i_de, sr)`.
#[pyfunction]
#[pyo3(signature = (lr, reference, model, denoiser="gaussian", steps=50, seed=0, tile=64, def_enabled=true, dcn_enabled=true, hr=None))]
#[allow(clippy::too_many_arguments)]
fn super_resolve(
    lr: &PyImage,
    reference: &PyImage,
    model: &PyModel,
    denoiser: &str,
    steps: usize,
    seed: u64,
    tile: usize,
    def_enabled: bool,
    dcn_enabled: bool,
    hr: Option<&PyImage>,
) -> PyResult<(PyImage, PyImage)> {
    let cfg = config(denoiser, steps, seed, tile, def_enabled, dcn_enabled)?;
    let out = pipeline::run_pipeline(&lr.0, &reference.0, &cfg, &model.0, hr.map(|h| &h.0)).map_err(err)?;
    Ok((PyImage(out.i_de), PyImage(out.sr)))
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    psnr_y(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    ssim_y(&a.0, &b.0).map_err(err)
}

/// Coarsest-level correspondences of `query` into `reference`, as
/// `(row, col, confidence)` per query position in row-major order.
#[pyfunction]
#[pyo3(signature = (query, reference, extractor_seed=DEFAULT_EXTRACTOR_SEED))]
fn correspondences(query: &PyImage, reference: &PyImage, extractor_seed: u64) -> PyResult<Vec<(usize, usize, f64)>> {
    let ex = FeatureExtractor::new(extractor_seed);
    let q = ex.extract(&query.0).map_err(err)?;
    let r = ex.extract(&reference.0).map_err(err)?;
    let maps = match_pyramids(&q, &r).map_err(err)?;
    let coarse = maps.last().ok_or_else(|| PyValueError::new_err("empty pyramid"))?;
    let rw = coarse.ref_grid.1;
    Ok(coarse.index.iter().zip(&coarse.confidence).map(|(&j, &c)| (j / rw, j % rw, c)).collect())
}

#[pymodule]
#[pyo3(name = "defsr")]
fn defsr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    m.add_function(wrap_pyfunction!(super_resolve, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(correspondences, m)?)?;
    Ok(())
}
