//! Python bindings. Images are `float64` NumPy arrays shaped `(1, C, H, W)`
//! with values in `[0, 1]`.

use std::path::PathBuf;

use numpy::{PyArray1, PyArrayDyn, PyArrayMethods, PyReadonlyArrayDyn, PyUntypedArrayMethods};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use moe_dehaze::harness::cli;
use moe_dehaze::hazegen::{self, DatasetConfig, DepthMap, HazeScene, Split};
use moe_dehaze::metrics::{self, CHARBONNIER_EPS};
use moe_dehaze::model::{
    build, count_parameters, stored_precision, Checkpoint, ModelConfig, Network,
};
use moe_dehaze::prior::{self, DarkChannelEstimator};
use moe_dehaze::{Error, Precision, Scalar, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_in<T: Scalar>(a: &PyReadonlyArrayDyn<'_, f64>) -> PyResult<Tensor<T>> {
    let data: Vec<T> = a.as_array().iter().map(|&v| T::of(v)).collect();
    Tensor::new(a.shape(), data).map_err(py_err)
}

fn array_out<'py, T: Scalar>(
    py: Python<'py>,
    t: &Tensor<T>,
) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    PyArray1::from_vec(py, t.to_f64_vec()).reshape(t.shape().to_vec())
}

/// Network hyperparameters.
#[pyclass(name = "ModelConfig", module = "moe_dehaze", frozen, from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// `preset` is `"tiny"` or `"full"`.
    #[new]
    #[pyo3(signature = (preset = "tiny"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(PyModelConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: ModelConfig::from_toml(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels
    }

    #[getter]
    fn blocks(&self) -> Vec<usize> {
        self.inner.blocks.clone()
    }

    #[getter]
    fn experts(&self) -> Vec<usize> {
        self.inner.experts.clone()
    }

    #[getter]
    fn top_k(&self) -> Vec<usize> {
        self.inner.top_k.clone()
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.base_channels
    }

    #[getter]
    fn size_multiple(&self) -> usize {
        self.inner.size_multiple()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(levels={}, blocks={:?}, experts={:?}, top_k={:?}, base_channels={})",
            self.inner.levels,
            self.inner.blocks,
            self.inner.experts,
            self.inner.top_k,
            self.inner.base_channels
        )
    }
}

enum Net {
    F32(Network<f32>),
    F64(Network<f64>),
}

/// A dehazing network in 32- or 64-bit precision.
#[pyclass(name = "Network", module = "moe_dehaze", frozen)]
struct PyNetwork {
    net: Net,
}

#[pymethods]
impl PyNetwork {
    /// Builds a freshly initialised network.
    #[new]
    #[pyo3(signature = (config = None, seed = 0, precision = "f32"))]
    fn new(config: Option<PyModelConfig>, seed: u64, precision: &str) -> PyResult<Self> {
        let cfg = config.map_or_else(ModelConfig::tiny, |c| c.inner);
        let net = match Precision::from_tag(precision) {
            Some(Precision::F32) => Net::F32(build(&cfg, seed).map_err(py_err)?),
            Some(Precision::F64) => Net::F64(build(&cfg, seed).map_err(py_err)?),
            None => {
                return Err(PyValueError::new_err(format!(
                    "unknown precision {precision:?}"
                )))
            }
        };
        Ok(PyNetwork { net })
    }

    /// Loads a checkpoint in whatever precision it was written.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let net = match stored_precision(&path).map_err(py_err)? {
            Precision::F32 => Net::F32(
                Network::from_checkpoint(&Checkpoint::load(&path).map_err(py_err)?)
                    .map_err(py_err)?,
            ),
            Precision::F64 => Net::F64(
                Network::from_checkpoint(&Checkpoint::load(&path).map_err(py_err)?)
                    .map_err(py_err)?,
            ),
        };
        Ok(PyNetwork { net })
    }

    #[pyo3(signature = (path, step = 0))]
    fn save(&self, path: PathBuf, step: u64) -> PyResult<()> {
        match &self.net {
            Net::F32(n) => n.to_checkpoint(step).save(&path),
            Net::F64(n) => n.to_checkpoint(step).save(&path),
        }
        .map_err(py_err)
    }

    /// Restores a `(1, C, H, W)` hazy image of any size.
    fn dehaze<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArrayDyn<'py, f64>,
    ) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
        match &self.net {
            Net::F32(n) => array_out(py, &n.dehaze(&tensor_in(&image)?).map_err(py_err)?),
            Net::F64(n) => array_out(py, &n.dehaze(&tensor_in(&image)?).map_err(py_err)?),
        }
    }

    /// Degradation prior the built-in estimator assigns to `image`.
    fn estimate_prior(&self, image: PyReadonlyArrayDyn<'_, f64>) -> PyResult<Vec<f64>> {
        let prior = match &self.net {
            Net::F32(n) => n.estimate_prior(&tensor_in(&image)?),
            Net::F64(n) => n.estimate_prior(&tensor_in(&image)?),
        }
        .map_err(py_err)?;
        Ok(prior.probs().to_vec())
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        let inner = match &self.net {
            Net::F32(n) => n.config().clone(),
            Net::F64(n) => n.config().clone(),
        };
        PyModelConfig { inner }
    }

    #[getter]
    fn precision(&self) -> &'static str {
        match &self.net {
            Net::F32(_) => Precision::F32.tag(),
            Net::F64(_) => Precision::F64.tag(),
        }
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        match &self.net {
            Net::F32(n) => count_parameters(n),
            Net::F64(n) => count_parameters(n),
        }
    }
}

/// Hazy image `clean * t + airlight * (1 - t)` with `t = exp(-beta * depth)`.
/// `depth` is `(H, W)`; `airlight` has one entry or one per channel.
#[pyfunction]
fn synthesize<'py>(
    py: Python<'py>,
    clean: PyReadonlyArrayDyn<'py, f64>,
    depth: PyReadonlyArrayDyn<'py, f64>,
    beta: f64,
    airlight: Vec<f64>,
) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
    let &[h, w] = depth.shape() else {
        return Err(PyValueError::new_err("depth must be 2-D"));
    };
    let scene = HazeScene {
        clean: tensor_in(&clean)?,
        depth: DepthMap::new(h, w, depth.as_array().iter().copied().collect()).map_err(py_err)?,
        beta,
        airlight,
    };
    array_out(py, &hazegen::synthesize(&scene).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(
    a: PyReadonlyArrayDyn<'_, f64>,
    b: PyReadonlyArrayDyn<'_, f64>,
    peak: f64,
) -> PyResult<f64> {
    metrics::psnr(&tensor_in::<f64>(&a)?, &tensor_in(&b)?, peak).map_err(py_err)
}

/// Gaussian-window SSIM on the channel mean.
#[pyfunction]
fn ssim(a: PyReadonlyArrayDyn<'_, f64>, b: PyReadonlyArrayDyn<'_, f64>) -> PyResult<f64> {
    metrics::ssim(&tensor_in::<f64>(&a)?, &tensor_in(&b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (clean, restored, eps = CHARBONNIER_EPS))]
fn charbonnier(
    clean: PyReadonlyArrayDyn<'_, f64>,
    restored: PyReadonlyArrayDyn<'_, f64>,
    eps: f64,
) -> PyResult<f64> {
    metrics::charbonnier_value(&tensor_in::<f64>(&clean)?, &tensor_in(&restored)?, eps)
        .map_err(py_err)
}

/// Haze-density score in `[0, 1]` from the dark channel.
#[pyfunction]
#[pyo3(signature = (image, window = DarkChannelEstimator::DEFAULT_WINDOW))]
fn dark_channel_density(image: PyReadonlyArrayDyn<'_, f64>, window: usize) -> PyResult<f64> {
    prior::dark_channel_density(&tensor_in::<f64>(&image)?, window).map_err(py_err)
}

/// Labels each score `"light"`, `"medium"` or `"dense"` by rank.
#[pyfunction]
#[pyo3(signature = (scores, quantiles = (0.183, 0.817)))]
fn bin_by_intensity(scores: Vec<f64>, quantiles: (f64, f64)) -> PyResult<Vec<&'static str>> {
    let b = hazegen::bin_by_intensity(&scores, quantiles).map_err(py_err)?;
    Ok(b.labels.iter().map(|l| l.as_str()).collect())
}

/// Writes a paired dataset to `out_dir` and returns `(train, test)` pair
/// counts. Procedural scenes are generated when `clean_dir` is omitted.
#[pyfunction]
#[pyo3(signature = (out_dir, clean_dir = None, scenes = 8, size = 64, seed = 0, test_fraction = 0.2))]
fn make_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    clean_dir: Option<PathBuf>,
    scenes: usize,
    size: usize,
    seed: u64,
    test_fraction: f64,
) -> PyResult<(usize, usize)> {
    let cfg = DatasetConfig {
        seed,
        test_fraction,
        ..DatasetConfig::default()
    };
    py.detach(|| {
        let clean = match clean_dir {
            Some(d) => d,
            None => {
                let d = out_dir.join("clean_source");
                hazegen::write_procedural_scenes(&d, scenes, size, size, seed)?;
                d
            }
        };
        let m = hazegen::make_dataset(&clean, &out_dir, &cfg)?;
        Ok((m.split(Split::Train).count(), m.split(Split::Test).count()))
    })
    .map_err(py_err)
}

/// Runs the `dehaze` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| cli::run(std::iter::once("dehaze".to_string()).chain(args)))
}

#[pymodule]
#[pyo3(name = "moe_dehaze")]
fn moe_dehaze_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(charbonnier, m)?)?;
    m.add_function(wrap_pyfunction!(dark_channel_density, m)?)?;
    m.add_function(wrap_pyfunction!(bin_by_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("CHARBONNIER_EPS", CHARBONNIER_EPS)?;
    Ok(())
}
