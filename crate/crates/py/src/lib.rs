//! Python module `selfrecon`: images, poses, metrics, reconstruction and
//! the command-line entry point.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use selfrecon::dataworld::{generate_shape, render_shape_views, ShapeFamily};
use selfrecon::evalharness::{camera_at, psnr as psnr_db, ssim as ssim_index};
use selfrecon::geometry::{RelativePose, Rig};
use selfrecon::image::{Image as CoreImage, BACKGROUND_GRAY};
use selfrecon::perceptual::{PerceptualBackend, RandomConvPyramid};
use selfrecon::reconstructor::{init_params, reconstruct, ReconstructorParams};
use selfrecon::renderfield::{composite_background, render, RenderSettings, Triplane};
use selfrecon::selftrain::{curriculum_bounds as bounds, read_checkpoint, CurriculumRange, CurriculumState};
use selfrecon::shell::{run_from_args, RunConfig};
use selfrecon::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Toml(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Image { .. } | Error::Refused { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// RGB image in [0, 1], row-major.
#[pyclass(name = "Image", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage(CoreImage);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        if data.len() != width * height * 3 {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", width * height * 3, data.len())));
        }
        Ok(PyImage(CoreImage::new(width, height, data)))
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        PyImage(CoreImage::filled(width, height, rgb))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreImage::load_png(&path).map(PyImage).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn resize(&self, width: usize, height: usize) -> Self {
        PyImage(self.0.resize(width, height))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// Azimuth/elevation offset from the canonical view, in degrees.
#[pyclass(name = "RelativePose", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyRelativePose(RelativePose);

#[pymethods]
impl PyRelativePose {
    #[new]
    fn new(azimuth_deg: f64, elevation_deg: f64) -> PyResult<Self> {
        RelativePose::new(azimuth_deg, elevation_deg).map(PyRelativePose).map_err(py_err)
    }

    #[getter]
    fn azimuth_deg(&self) -> f64 {
        self.0.azimuth_deg
    }

    #[getter]
    fn elevation_deg(&self) -> f64 {
        self.0.elevation_deg
    }

    fn inverse(&self) -> Self {
        PyRelativePose(self.0.inverse())
    }

    /// Camera center in world coordinates under the default rig.
    fn camera_center(&self) -> PyResult<[f64; 3]> {
        Ok(camera_at(&Rig::default(), self.0).map_err(py_err)?.center())
    }

    fn __repr__(&self) -> String {
        format!("RelativePose({}, {})", self.0.azimuth_deg, self.0.elevation_deg)
    }
}

/// A reconstructed triplane that renders from any pose.
#[pyclass(name = "Scene", frozen)]
struct PyScene {
    triplane: Triplane,
    params: Arc<ReconstructorParams>,
}

#[pymethods]
impl PyScene {
    #[pyo3(signature = (azimuth_deg, elevation_deg, resolution, samples_per_ray = 48))]
    fn render(
        &self,
        py: Python<'_>,
        azimuth_deg: f64,
        elevation_deg: f64,
        resolution: usize,
        samples_per_ray: usize,
    ) -> PyResult<PyImage> {
        let settings = RenderSettings::new(resolution, samples_per_ray);
        let delta = RelativePose { azimuth_deg, elevation_deg };
        py.detach(|| {
            let view = render(&self.triplane, &self.params.decoder, &camera_at(&settings.rig, delta)?, &settings)?;
            Ok(PyImage(composite_background(&view, [BACKGROUND_GRAY; 3])))
        })
        .map_err(py_err)
    }
}

/// Reconstructor weights, from a checkpoint or freshly initialized.
#[pyclass(name = "Model", frozen)]
struct PyModel(Arc<ReconstructorParams>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel(Arc::new(read_checkpoint(&path).map_err(py_err)?.params)))
    }

    /// Random initialization from the `[train.model]` table of a TOML run config.
    #[staticmethod]
    #[pyo3(signature = (config_toml = "", seed = 0))]
    fn init(config_toml: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
        Ok(PyModel(Arc::new(init_params(&cfg.train.model, seed).map_err(py_err)?)))
    }

    #[getter]
    fn input_resolution(&self) -> usize {
        self.0.config.input_resolution
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn reconstruct(&self, py: Python<'_>, image: &PyImage) -> PyResult<PyScene> {
        let r = self.input_resolution();
        let input = if image.0.width() == r && image.0.height() == r { image.0.clone() } else { image.0.resize(r, r) };
        let triplane = py.detach(|| reconstruct(&self.0, &input)).map_err(py_err)?;
        Ok(PyScene { triplane, params: self.0.clone() })
    }
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    psnr_db(&a.0, &b.0).map_err(py_err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    ssim_index(&a.0, &b.0).map_err(py_err)
}

/// Distance under the built-in random-convolution backend.
#[pyfunction]
#[pyo3(signature = (a, b, seed = 0x5eed))]
fn perceptual_distance(a: &PyImage, b: &PyImage, seed: u64) -> PyResult<f64> {
    RandomConvPyramid::new(seed).distance(&a.0, &b.0).map_err(py_err)
}

/// `(theta_max, phi_max)` in degrees at iteration `j` of `j_max`.
#[pyfunction]
fn curriculum_bounds(j: usize, j_max: usize) -> PyResult<(f64, f64)> {
    let state = CurriculumState::new(j, j_max, CurriculumRange::default()).map_err(py_err)?;
    bounds(&state).map_err(py_err)
}

/// Gray-composited renders of a procedural shape.
#[pyfunction]
#[pyo3(signature = (seed, poses, resolution, samples_per_ray = 64, pseudo_real = false))]
fn render_toy_shape(
    py: Python<'_>,
    seed: u64,
    poses: Vec<PyRelativePose>,
    resolution: usize,
    samples_per_ray: usize,
    pseudo_real: bool,
) -> PyResult<Vec<PyImage>> {
    let family = if pseudo_real { ShapeFamily::PseudoReal } else { ShapeFamily::Synthetic };
    let shape = generate_shape(seed, family);
    let poses: Vec<RelativePose> = poses.into_iter().map(|p| p.0).collect();
    let views = py
        .detach(|| render_shape_views(&shape, &poses, resolution, samples_per_ray, Rig::default()))
        .map_err(py_err)?;
    Ok(views.into_iter().map(|(img, _)| PyImage(img)).collect())
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(py_err)
}

/// Runs the command-line tool with `args` (without the program name);
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| run_from_args(std::iter::once("selfrecon".to_string()).chain(args)))
}

#[pymodule(name = "selfrecon")]
fn selfrecon_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyRelativePose>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(perceptual_distance, m)?)?;
    m.add_function(wrap_pyfunction!(curriculum_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(render_toy_shape, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
