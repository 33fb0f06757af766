//! Python bindings: grids, phantoms, the pipeline stages and the experiment
//! commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use xtrack_core::config::{ExperimentConfig, Scale};
use xtrack_core::eval;
use xtrack_core::experiment;
use xtrack_core::features;
use xtrack_core::phantom;
use xtrack_core::projector;
use xtrack_core::registration;
use xtrack_core::tracking;
use xtrack_core::{DisplacementField2, Error as CoreError, ScalarImage, ScalarVolume};

fn err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// 2D grid of floats, x fastest.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage(ScalarImage);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        ScalarImage::new(width, height, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        xtrack_core::io::read_image(&path).map(Self).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f64> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err("pixel outside image"));
        }
        Ok(self.0.get(x, y))
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max(&self) -> f64 {
        self.0.max()
    }

    fn min(&self) -> f64 {
        self.0.min()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// 3D grid of floats, x fastest, then y, then z.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume(ScalarVolume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 3], data: Vec<f64>) -> PyResult<Self> {
        ScalarVolume::new(dims, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        xtrack_core::io::read_volume(&path).map(Self).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        let d = self.0.dims();
        if x >= d[0] || y >= d[1] || z >= d[2] {
            return Err(PyValueError::new_err("voxel outside volume"));
        }
        Ok(self.0.get(x, y, z))
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max(&self) -> f64 {
        self.0.max()
    }

    fn __repr__(&self) -> String {
        let [x, y, z] = self.0.dims();
        format!("Volume({x}x{y}x{z})")
    }
}

/// Tube-shaped line fiducial given by its centreline.
#[pyclass(name = "Polyline", from_py_object)]
#[derive(Clone)]
struct PyPolyline(xtrack_core::Polyline3);

#[pymethods]
impl PyPolyline {
    #[new]
    fn new(points: Vec<[f64; 3]>, radius: f64) -> PyResult<Self> {
        xtrack_core::Polyline3::new(points, radius).map(Self).map_err(err)
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.0.points().to_vec()
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.0.radius()
    }

    fn length(&self) -> f64 {
        self.0.length()
    }

    fn __repr__(&self) -> String {
        format!("Polyline({} points, radius {})", self.0.points().len(), self.0.radius())
    }
}

fn wrap_lines(lines: &[xtrack_core::Polyline3]) -> Vec<PyPolyline> {
    lines.iter().cloned().map(PyPolyline).collect()
}

fn unwrap_lines(lines: Vec<PyPolyline>) -> Vec<xtrack_core::Polyline3> {
    lines.into_iter().map(|l| l.0).collect()
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    /// Parse TOML over the `scale` preset (`"desk"` or `"paper"`).
    #[new]
    #[pyo3(signature = (toml = "", scale = None))]
    fn new(toml: &str, scale: Option<&str>) -> PyResult<Self> {
        let scale = match scale {
            None => None,
            Some("desk") => Some(Scale::Desk),
            Some("paper") => Some(Scale::Paper),
            Some(s) => return Err(PyValueError::new_err(format!("unknown scale {s:?}"))),
        };
        ExperimentConfig::from_toml(toml, scale).map(Self).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.0.phantom.dims
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

/// Start volume and its lines for the configured phantom.
#[pyfunction]
fn gen_start_volume(config: &PyConfig) -> PyResult<(PyVolume, Vec<PyPolyline>)> {
    let p = phantom::gen_start_volume(&config.0.phantom_spec()).map_err(err)?;
    Ok((PyVolume(p.volume), wrap_lines(&p.lines)))
}

/// All frames of the configured sequence, starting frame first.
#[pyfunction]
fn deformation_sequence(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<(PyVolume, Vec<PyPolyline>)>> {
    let cfg = config.0.clone();
    let frames = py
        .detach(move || {
            let p = phantom::gen_start_volume(&cfg.phantom_spec())?;
            phantom::apply_deformation_sequence(&p, &cfg.deformation_spec())
        })
        .map_err(err)?;
    Ok(frames.into_iter().map(|f| (PyVolume(f.volume), wrap_lines(&f.lines))).collect())
}

/// Line integrals of `volume` for view 0 or 1 of the configured geometry.
#[pyfunction]
fn forward_project(volume: &PyVolume, config: &PyConfig, view: usize) -> PyResult<PyImage> {
    projector::forward_project(&volume.0, &config.0.geometry, view).map(PyImage).map_err(err)
}

#[pyfunction]
fn add_poisson_noise(image: &PyImage, scale: f64, seed: u64) -> PyResult<PyImage> {
    phantom::add_poisson_noise(&image.0, scale, seed).map(PyImage).map_err(err)
}

/// Register `moving` onto `fixed`; returns the moved image and the field as
/// `(dx, dy)` lists.
#[pyfunction]
fn register_2d(
    py: Python<'_>,
    moving: &PyImage,
    fixed: &PyImage,
    config: &PyConfig,
) -> PyResult<(PyImage, Vec<f64>, Vec<f64>)> {
    let (m, f, c) = (moving.0.clone(), fixed.0.clone(), config.0.reg2d.clone());
    let (moved, field): (ScalarImage, DisplacementField2) = py
        .detach(move || {
            let r = registration::register_2d(&m, &f, &c)?;
            Ok::<_, CoreError>((xtrack_core::warp_image(&m, &r.field)?, r.field))
        })
        .map_err(err)?;
    Ok((PyImage(moved), field.dx().to_vec(), field.dy().to_vec()))
}

/// Feature response in [0, 1], its binary map and the threshold used.
#[pyfunction]
fn detect_features(image: &PyImage, config: &PyConfig) -> PyResult<(PyImage, PyImage, f64)> {
    let f = features::detect_features_2d_with(&image.0, &config.0.detector).map_err(err)?;
    let binary = f.binary();
    Ok((PyImage(f.response), PyImage(binary), f.threshold))
}

/// Back-projection evidence of two views' feature maps.
#[pyfunction]
fn make_bp_evidence(map0: &PyImage, map1: &PyImage, config: &PyConfig) -> PyResult<PyVolume> {
    projector::make_bp_evidence(&map0.0, &map1.0, &config.0.geometry, config.0.phantom.dims)
        .map(|e| PyVolume(e.volume))
        .map_err(err)
}

/// One tracked frame.
#[pyclass(name = "FrameEstimate")]
struct PyFrameEstimate(tracking::FrameEstimate);

#[pymethods]
impl PyFrameEstimate {
    #[getter]
    fn lines(&self) -> Vec<PyPolyline> {
        wrap_lines(&self.0.lines)
    }

    #[getter]
    fn tracked_lines(&self) -> Vec<PyPolyline> {
        wrap_lines(&self.0.tracked_lines)
    }

    #[getter]
    fn feature_volume(&self) -> PyVolume {
        PyVolume(self.0.feature_volume.clone())
    }

    #[getter]
    fn evidence(&self) -> PyVolume {
        PyVolume(self.0.evidence.clone())
    }

    #[getter]
    fn moved(&self) -> (PyImage, PyImage) {
        (PyImage(self.0.moved[0].clone()), PyImage(self.0.moved[1].clone()))
    }

    #[getter]
    fn responses(&self) -> (PyImage, PyImage) {
        (
            PyImage(self.0.features[0].response.clone()),
            PyImage(self.0.features[1].response.clone()),
        )
    }

    /// Stage name to output checksum.
    fn checksums(&self) -> Vec<(String, String)> {
        self.0.diagnostics.stages.iter().map(|s| (s.stage.clone(), s.checksum.clone())).collect()
    }
}

/// Full pipeline for one frame.
#[pyfunction]
fn track_frame(
    py: Python<'_>,
    prior_volume: &PyVolume,
    prior_lines: Vec<PyPolyline>,
    noisy0: &PyImage,
    noisy1: &PyImage,
    config: &PyConfig,
) -> PyResult<PyFrameEstimate> {
    let (v, l, n0, n1, c) = (
        prior_volume.0.clone(),
        unwrap_lines(prior_lines),
        noisy0.0.clone(),
        noisy1.0.clone(),
        config.0.clone(),
    );
    py.detach(move || tracking::track_frame(&v, &l, [&n0, &n1], &c.geometry, &c.pipeline()))
        .map(PyFrameEstimate)
        .map_err(err)
}

#[pyfunction]
fn chamfer_distance(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    eval::chamfer_distance(&a, &b).map_err(err)
}

/// Chamfer distance between two volumes thresholded at half their maxima.
#[pyfunction]
fn volume_chamfer(estimate: &PyVolume, truth: &PyVolume) -> PyResult<f64> {
    eval::volume_chamfer(&estimate.0, &truth.0).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    eval::roc_curve(&scores, &truth).map(|r| r.auc).map_err(err)
}

#[pyfunction]
fn rasterize(lines: Vec<PyPolyline>, dims: [usize; 3]) -> PyResult<PyVolume> {
    xtrack_core::rasterize_polylines(&unwrap_lines(lines), dims).map(PyVolume).map_err(err)
}

/// Write a dataset; returns the number of artifacts.
#[pyfunction]
fn gen(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<usize> {
    let c = config.0.clone();
    py.detach(move || experiment::cmd_gen(&c, &out)).map(|m| m.artifacts.len()).map_err(err)
}

/// Track a dataset; returns the run manifest digest.
#[pyfunction]
fn track(py: Python<'_>, config: &PyConfig, dataset: PathBuf, out: PathBuf) -> PyResult<String> {
    let c = config.0.clone();
    py.detach(move || experiment::cmd_track(&c, &dataset, &out)).map(|m| m.digest()).map_err(err)
}

/// Evaluate a run; returns `(passed, report text)`.
#[pyfunction]
fn evaluate(run: PathBuf) -> PyResult<(bool, String)> {
    experiment::cmd_eval(&run).map(|r| (r.passed(), r.to_text())).map_err(err)
}

#[pymodule]
fn xtrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyPolyline>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFrameEstimate>()?;
    m.add_function(wrap_pyfunction!(gen_start_volume, m)?)?;
    m.add_function(wrap_pyfunction!(deformation_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(forward_project, m)?)?;
    m.add_function(wrap_pyfunction!(add_poisson_noise, m)?)?;
    m.add_function(wrap_pyfunction!(register_2d, m)?)?;
    m.add_function(wrap_pyfunction!(detect_features, m)?)?;
    m.add_function(wrap_pyfunction!(make_bp_evidence, m)?)?;
    m.add_function(wrap_pyfunction!(track_frame, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(volume_chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
