//! Python bindings: `import ripa`.
//!
//! Configuration objects wrap the Rust types; results come back as plain
//! dicts, lists and floats.

use std::f64::consts::PI;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use ripa_core::analysis::{self, CrosstalkOptions};
use ripa_core::array::{self, Tone, ToneSet};
use ripa_core::beam_optics::{self, HgOptions};
use ripa_core::calibration::{self, AberrationModel, CalibrationOptions};
use ripa_core::drive::{self, GridVariant};
use ripa_core::focal::{self, FocalWindow};
use ripa_core::time::{self, DriveProgram};
use ripa_core::{Error, LossModel, RipaGeometry};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Serialises through JSON into native Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Default value of `T` with keyword arguments laid over it.
fn with_kwargs<T: Serialize + DeserializeOwned + Default>(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut doc = serde_json::to_value(T::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(kw) = kwargs {
        let text: String = kw.py().import("json")?.call_method1("dumps", (kw,))?.extract()?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let (Value::Object(base), Value::Object(p)) = (&mut doc, patch) {
            base.extend(p);
        }
    }
    serde_json::from_value(doc).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Device geometry. Keyword arguments override the built-in device, e.g.
/// `Geometry(n_cols=10, n_rows=10)`.
#[pyclass(name = "Geometry", module = "ripa", skip_from_py_object)]
#[derive(Clone)]
pub struct PyGeometry {
    inner: RipaGeometry,
}

#[pymethods]
impl PyGeometry {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            inner: with_kwargs(kwargs)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: from_json(text)?,
        })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn with_counts(&self, n_cols: usize, n_rows: usize) -> Self {
        Self {
            inner: self.inner.with_counts(n_cols, n_rows),
        }
    }

    #[getter]
    fn n_cols(&self) -> usize {
        self.inner.n_cols
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows
    }

    #[getter]
    fn wavelength(&self) -> f64 {
        self.inner.wavelength
    }

    #[getter]
    fn fsr_1(&self) -> f64 {
        self.inner.fsr_1()
    }

    #[getter]
    fn fsr_2(&self) -> f64 {
        self.inner.fsr_2()
    }

    #[getter]
    fn bz_extent(&self) -> f64 {
        self.inner.bz_extent()
    }

    #[getter]
    fn length_ratio(&self) -> f64 {
        self.inner.length_ratio()
    }

    /// (w_x, w_y) of a single focal spot.
    #[getter]
    fn spot_waists(&self) -> (f64, f64) {
        self.inner.spot_waists()
    }

    fn __repr__(&self) -> String {
        format!(
            "Geometry(n_cols={}, n_rows={}, wavelength={:e})",
            self.inner.n_cols, self.inner.n_rows, self.inner.wavelength
        )
    }
}

/// Per-round-trip losses and downstream efficiencies.
#[pyclass(name = "LossModel", module = "ripa", skip_from_py_object)]
#[derive(Clone)]
pub struct PyLossModel {
    inner: LossModel,
}

#[pymethods]
impl PyLossModel {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            inner: with_kwargs(kwargs)?,
        })
    }

    #[staticmethod]
    fn lossless() -> Self {
        Self {
            inner: LossModel::lossless(),
        }
    }

    #[staticmethod]
    fn uniform(per_roundtrip: f64) -> Self {
        Self {
            inner: LossModel::uniform(per_roundtrip),
        }
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("LossModel({:?})", self.inner)
    }
}

#[pyfunction]
fn derive_quantities<'py>(py: Python<'py>, geometry: PyRef<'_, PyGeometry>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ripa_core::derive_quantities(&geometry.inner).map_err(err)?)
}

/// Focal-plane position addressed by a detuning, folded into the first zone.
#[pyfunction]
fn spot_position(detuning_hz: f64, geometry: PyRef<'_, PyGeometry>) -> (f64, f64) {
    array::spot_position(detuning_hz, &geometry.inner)
}

/// Inter-beam phase steps (x, y) in rad.
#[pyfunction]
fn phase_pair(detuning_hz: f64, geometry: PyRef<'_, PyGeometry>) -> (f64, f64) {
    array::phase_pair(detuning_hz, &geometry.inner)
}

#[pyfunction]
fn focal_intensity(
    detuning_hz: f64,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    x: f64,
    y: f64,
) -> f64 {
    let arr = array::synthesize_array(&Tone::at(detuning_hz), &geometry.inner, &loss.inner);
    focal::focal_intensity_analytic(&arr, &geometry.inner, (x, y))
}

/// Static image of equal-amplitude tones: dict with `values` indexed
/// `[ix][iy]`, `dx` and `origin`.
#[pyfunction]
#[pyo3(signature = (detunings, geometry, loss, n=128, spacing=None, center=(0.0, 0.0)))]
fn focal_image<'py>(
    py: Python<'py>,
    detunings: Vec<f64>,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    n: usize,
    spacing: Option<f64>,
    center: (f64, f64),
) -> PyResult<Bound<'py, PyAny>> {
    let g = geometry.inner.clone();
    let l = loss.inner.clone();
    let window = FocalWindow::new(center, spacing.unwrap_or(g.bz_extent() / n as f64), n);
    let tones = ToneSet(detunings.into_iter().map(Tone::at).collect());
    let img = py
        .detach(|| focal::static_image(&tones, &g, &l, &window))
        .map_err(err)?;
    let values: Vec<Vec<f64>> = img.values.rows().into_iter().map(|r| r.to_vec()).collect();
    to_py(
        py,
        &serde_json::json!({"values": values, "dx": img.dx, "origin": img.origin}),
    )
}

/// Gaussian fits of each tone's spot.
#[pyfunction]
fn fit_spots<'py>(
    py: Python<'py>,
    detunings: Vec<f64>,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
) -> PyResult<Bound<'py, PyAny>> {
    let (g, l) = (geometry.inner.clone(), loss.inner.clone());
    let tones = ToneSet(detunings.into_iter().map(Tone::at).collect());
    let fits = py.detach(|| analysis::fit_tone_spots(&tones, &g, &l)).map_err(err)?;
    to_py(py, &fits)
}

#[pyfunction]
#[pyo3(signature = (n, geometry, variant="quasi-square"))]
fn tones_for_grid(n: usize, geometry: PyRef<'_, PyGeometry>, variant: &str) -> PyResult<Vec<f64>> {
    let v = match variant {
        "quasi-square" => GridVariant::QuasiSquare,
        "orthogonal" => GridVariant::Orthogonal,
        other => return Err(PyValueError::new_err(format!("unknown grid variant {other:?}"))),
    };
    Ok(drive::tones_for_grid(n, &geometry.inner, v)
        .map_err(err)?
        .iter()
        .map(|t| t.detuning)
        .collect())
}

/// Detunings addressing the targets; dict with `detunings`,
/// `placement_errors` and `channels`.
#[pyfunction]
#[pyo3(signature = (targets, geometry, channelized=false))]
fn tones_for_spots<'py>(
    py: Python<'py>,
    targets: Vec<(f64, f64)>,
    geometry: PyRef<'_, PyGeometry>,
    channelized: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let a = drive::tones_for_spots(&targets, &geometry.inner, channelized).map_err(err)?;
    let detunings: Vec<f64> = a.tones.iter().map(|t| t.detuning).collect();
    to_py(
        py,
        &serde_json::json!({"detunings": detunings, "placement_errors": a.placement_errors, "channels": a.channels}),
    )
}

/// Azimuthally averaged crosstalk at a separation given in spot waists.
#[pyfunction]
#[pyo3(signature = (geometry, loss, separation, n_azimuth=64))]
fn crosstalk(
    py: Python<'_>,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    separation: f64,
    n_azimuth: usize,
) -> PyResult<f64> {
    let (g, l) = (geometry.inner.clone(), loss.inner.clone());
    py.detach(|| analysis::crosstalk_at(&g, &l, separation, n_azimuth))
        .map_err(err)
}

#[pyfunction]
fn crosstalk_curve(
    py: Python<'_>,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    separations: Vec<f64>,
) -> PyResult<Vec<(f64, f64)>> {
    let (g, l) = (geometry.inner.clone(), loss.inner.clone());
    let c = py
        .detach(|| analysis::crosstalk_curve(&g, &l, &separations, &CrosstalkOptions::default()))
        .map_err(err)?;
    Ok(c.points)
}

#[pyfunction]
fn powerlaw_fit<'py>(py: Python<'py>, points: Vec<(f64, f64)>, lo: f64, hi: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::powerlaw_fit(&points, (lo, hi)).map_err(err)?)
}

#[pyfunction]
fn efficiency_budget<'py>(
    py: Python<'py>,
    loss: PyRef<'_, PyLossModel>,
    geometry: PyRef<'_, PyGeometry>,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::efficiency_budget(&loss.inner, &geometry.inner))
}

#[pyfunction]
fn tradeoff_point<'py>(py: Python<'py>, n: usize, internal_loss: f64, kappa: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::tradeoff_point(n, internal_loss, kappa).map_err(err)?)
}

#[pyfunction]
fn secondary_peak_ratio(n: usize) -> PyResult<f64> {
    focal::secondary_peak_ratio(n).map_err(err)
}

/// Suppression statistics over an `n x n` sample of the first zone.
#[pyfunction]
#[pyo3(signature = (geometry, n=11))]
fn hg_suppression<'py>(py: Python<'py>, geometry: PyRef<'_, PyGeometry>, n: usize) -> PyResult<Bound<'py, PyAny>> {
    let g = &geometry.inner;
    to_py(
        py,
        &beam_optics::hg_suppression(g, &beam_optics::zone_positions(g, n), &HgOptions::default()).map_err(err)?,
    )
}

#[pyfunction]
fn stability_report<'py>(py: Python<'py>, roundtrip: f64, focal: f64, wavelength: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &beam_optics::stability_report(roundtrip, focal, wavelength))
}

/// Intensity at one focal point for a drive program given as JSON.
/// Returns `(times, values)`.
#[pyfunction]
#[pyo3(signature = (program_json, geometry, loss, point, dt, t_span))]
fn point_trace(
    py: Python<'_>,
    program_json: &str,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    point: (f64, f64),
    dt: f64,
    t_span: (f64, f64),
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let prog: DriveProgram = from_json(program_json)?;
    let (g, l) = (geometry.inner.clone(), loss.inner.clone());
    let tr = py
        .detach(|| time::point_trace(&prog, &g, &l, point, dt, t_span))
        .map_err(err)?;
    Ok((tr.times(), tr.values))
}

/// 10-90% edges of one pulse seen through a single-pole photodetector.
#[pyfunction]
#[pyo3(signature = (geometry, loss, duration=1e-6, bandwidth=50e6, dt=0.1e-9, aperture=75e-6))]
fn pulse_edges<'py>(
    py: Python<'py>,
    geometry: PyRef<'_, PyGeometry>,
    loss: PyRef<'_, PyLossModel>,
    duration: f64,
    bandwidth: f64,
    dt: f64,
    aperture: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (g, l) = (geometry.inner.clone(), loss.inner.clone());
    let edges = py
        .detach(|| {
            let start = 100e-9;
            let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), start, duration);
            let pts = time::square_aperture((0.0, 0.0), aperture, 16);
            let raw = time::region_trace(&prog, &g, &l, &pts, dt, (0.0, start + duration + 300e-9))?;
            time::rise_fall(&time::pd_filter(&raw, bandwidth)?, 0.1, 0.9)
        })
        .map_err(err)?;
    to_py(py, &edges)
}

/// Injects aberrations, calibrates them away and reports the Strehl ratio
/// before and after plus the correction mask `[i][j]`.
#[pyfunction]
#[pyo3(signature = (geometry, amplitude=PI, seed=0, smooth=false, noise=0.0))]
fn calibrate<'py>(
    py: Python<'py>,
    geometry: PyRef<'_, PyGeometry>,
    amplitude: f64,
    seed: u64,
    smooth: bool,
    noise: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let g = geometry.inner.clone();
    let model = if smooth {
        AberrationModel::SmoothLowOrder { amplitude }
    } else {
        AberrationModel::RandomUniform { amplitude }
    };
    let rep = py
        .detach(|| {
            let ab = calibration::inject_aberrations(&g, model, seed);
            let opts = CalibrationOptions {
                noise,
                seed: seed.wrapping_add(1),
                ..CalibrationOptions::default()
            };
            calibration::calibrate_and_verify_with(&g, &ab, &opts)
        })
        .map_err(err)?;
    let mask: Vec<Vec<f64>> = rep
        .mask
        .per_beam_correction
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    to_py(
        py,
        &serde_json::json!({
            "strehl_before": rep.strehl_before,
            "strehl_after": rep.strehl_after,
            "mask": mask,
        }),
    )
}

#[pymodule]
fn ripa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyLossModel>()?;
    m.add_function(wrap_pyfunction!(derive_quantities, m)?)?;
    m.add_function(wrap_pyfunction!(spot_position, m)?)?;
    m.add_function(wrap_pyfunction!(phase_pair, m)?)?;
    m.add_function(wrap_pyfunction!(focal_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(focal_image, m)?)?;
    m.add_function(wrap_pyfunction!(fit_spots, m)?)?;
    m.add_function(wrap_pyfunction!(tones_for_grid, m)?)?;
    m.add_function(wrap_pyfunction!(tones_for_spots, m)?)?;
    m.add_function(wrap_pyfunction!(crosstalk, m)?)?;
    m.add_function(wrap_pyfunction!(crosstalk_curve, m)?)?;
    m.add_function(wrap_pyfunction!(powerlaw_fit, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_budget, m)?)?;
    m.add_function(wrap_pyfunction!(tradeoff_point, m)?)?;
    m.add_function(wrap_pyfunction!(secondary_peak_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(hg_suppression, m)?)?;
    m.add_function(wrap_pyfunction!(stability_report, m)?)?;
    m.add_function(wrap_pyfunction!(point_trace, m)?)?;
    m.add_function(wrap_pyfunction!(pulse_edges, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
