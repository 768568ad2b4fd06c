//! Focal-plane field of the beam array: closed-form grating sums, an FFT
//! solver that samples the array plane directly, spot fitting, axial
//! propagation and the chirp-induced focal shift.

use std::f64::consts::{PI, TAU};

use ndarray::{s, Array2};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::array::{static_intensity_weights, synthesize_array, ArrayField, ToneSet};
use crate::config::{equivalent_waist, LossModel, RipaGeometry, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::fft::{fft2, freq_index};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::special::hermite_gauss;

/// Sampled complex field. `samples[[ix, iy]]` sits at
/// `(origin.0 + ix * dx, origin.1 + iy * dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub samples: Array2<Complex64>,
    pub dx: f64,
    pub dy: f64,
    pub origin: (f64, f64),
    pub plane_z: f64,
}

/// Sampled intensity on the same layout as [`FieldGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    pub values: Array2<f64>,
    pub dx: f64,
    pub dy: f64,
    pub origin: (f64, f64),
    pub plane_z: f64,
}

fn check_layout(dim: (usize, usize), dx: f64, dy: f64) -> Result<()> {
    if dim.0 < 2 || dim.1 < 2 {
        return Err(Error::Argument(format!("grid {dim:?} must be at least 2 x 2")));
    }
    if !(dx > 0.0 && dy > 0.0) {
        return Err(Error::Argument(format!(
            "grid spacings must be positive, got {dx}, {dy}"
        )));
    }
    Ok(())
}

impl FieldGrid {
    pub fn new(samples: Array2<Complex64>, dx: f64, dy: f64, origin: (f64, f64), plane_z: f64) -> Result<Self> {
        check_layout(samples.dim(), dx, dy)?;
        Ok(Self {
            samples,
            dx,
            dy,
            origin,
            plane_z,
        })
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.origin.0 + ix as f64 * self.dx
    }

    pub fn y(&self, iy: usize) -> f64 {
        self.origin.1 + iy as f64 * self.dy
    }

    pub fn intensity(&self) -> IntensityGrid {
        IntensityGrid {
            values: self.samples.mapv(|v| v.norm_sqr()),
            dx: self.dx,
            dy: self.dy,
            origin: self.origin,
            plane_z: self.plane_z,
        }
    }

    /// sum |E|^2 dx dy
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.dx * self.dy
    }
}

impl IntensityGrid {
    pub fn new(values: Array2<f64>, dx: f64, dy: f64, origin: (f64, f64), plane_z: f64) -> Result<Self> {
        check_layout(values.dim(), dx, dy)?;
        Ok(Self {
            values,
            dx,
            dy,
            origin,
            plane_z,
        })
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.origin.0 + ix as f64 * self.dx
    }

    pub fn y(&self, iy: usize) -> f64 {
        self.origin.1 + iy as f64 * self.dy
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest sample (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for (idx, &v) in self.values.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }

    /// Sub-sample peak position and value from a separable parabola through
    /// the 3 x 3 neighbourhood of sample `(ix, iy)`.
    pub fn refine_peak(&self, ix: usize, iy: usize) -> (f64, f64, f64) {
        let (nx, ny) = self.values.dim();
        let v = &self.values;
        let c = v[[ix, iy]];
        let vertex = |m: f64, p: f64| {
            let den = m - 2.0 * c + p;
            if den < 0.0 {
                let d = 0.5 * (m - p) / den;
                (d.clamp(-0.5, 0.5), c - 0.25 * (m - p) * d)
            } else {
                (0.0, c)
            }
        };
        let (ddx, vx) = if ix > 0 && ix + 1 < nx {
            vertex(v[[ix - 1, iy]], v[[ix + 1, iy]])
        } else {
            (0.0, c)
        };
        let (ddy, vy) = if iy > 0 && iy + 1 < ny {
            vertex(v[[ix, iy - 1]], v[[ix, iy + 1]])
        } else {
            (0.0, c)
        };
        (self.x(ix) + ddx * self.dx, self.y(iy) + ddy * self.dy, vx + vy - c)
    }

    /// Interior local maxima (8-neighbourhood) at or above `floor`, sorted by
    /// decreasing value.
    pub fn local_maxima(&self, floor: f64) -> Vec<(usize, usize, f64)> {
        let (nx, ny) = self.values.dim();
        let mut out = Vec::new();
        for ix in 1..nx.saturating_sub(1) {
            for iy in 1..ny.saturating_sub(1) {
                let c = self.values[[ix, iy]];
                if c < floor {
                    continue;
                }
                let mut is_max = true;
                'n: for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let n = self.values[[(ix as i64 + dx) as usize, (iy as i64 + dy) as usize]];
                        // Ties broken towards the lower index so plateaus yield one maximum.
                        if n > c || (n == c && (dx, dy) < (0, 0)) {
                            is_max = false;
                            break 'n;
                        }
                    }
                }
                if is_max {
                    out.push((ix, iy, c));
                }
            }
        }
        out.sort_by(|a, b| b.2.total_cmp(&a.2));
        out
    }
}

/// Square sampling window: `n.0 x n.1` points at `center + (k - n/2) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalWindow {
    pub center: (f64, f64),
    pub spacing: f64,
    pub n: (usize, usize),
}

impl FocalWindow {
    pub fn new(center: (f64, f64), spacing: f64, n: usize) -> Self {
        Self {
            center,
            spacing,
            n: (n, n),
        }
    }

    /// Window spanning `zones` Brillouin zones per axis (periodic sampling).
    pub fn zones(geom: &RipaGeometry, zones: usize, n: usize) -> Self {
        Self::new((0.0, 0.0), zones as f64 * geom.bz_extent() / n as f64, n)
    }

    pub fn origin(&self) -> (f64, f64) {
        (
            self.center.0 - (self.n.0 / 2) as f64 * self.spacing,
            self.center.1 - (self.n.1 / 2) as f64 * self.spacing,
        )
    }
}

/// sum_{k < n} r^k e^{i k theta}, closed form away from the pole.
pub fn axis_sum(n: usize, r: f64, theta: f64) -> Complex64 {
    let z = Complex64::from_polar(r, theta);
    let one = Complex64::new(1.0, 0.0);
    if (one - z).norm() < 1e-6 {
        let mut acc = Complex64::default();
        let mut term = one;
        for _ in 0..n {
            acc += term;
            term *= z;
        }
        acc
    } else {
        (one - z.powu(n as u32)) / (one - z)
    }
}

/// sin^2(n pi u) / sin^2(pi u) with the removable limit n^2.
pub fn grating_factor(n: usize, u: f64) -> f64 {
    let s = (PI * u).sin();
    if s.abs() < 1e-9 {
        (n * n) as f64
    } else {
        let t = (n as f64 * PI * u).sin();
        t * t / (s * s)
    }
}

/// Strongest secondary maximum of [`grating_factor`] relative to the main
/// peak. It lies between the first and second nulls, 1/n < u < 2/n.
pub fn secondary_peak_ratio(n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Argument(format!("{n} beams have no secondary maximum")));
    }
    let nf = n as f64;
    let f = |u: f64| grating_factor(n, u);
    let (mut a, mut b) = (1.0 / nf, 2.0 / nf);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    while b - a > 1e-13 / nf {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    Ok(f(0.5 * (a + b)) / (nf * nf))
}

/// Evaluator for the lens Fourier transform of an [`ArrayField`] built from
/// fundamental Gaussians.
pub struct AnalyticFocal<'a> {
    arr: &'a ArrayField,
    bz: f64,
    env_waist: f64,
    prefactor: f64,
}

impl<'a> AnalyticFocal<'a> {
    pub fn new(arr: &'a ArrayField, geom: &RipaGeometry) -> Self {
        let w0 = arr.mode_waist;
        Self {
            arr,
            bz: geom.focus_focal * geom.wavelength / arr.pitch,
            env_waist: geom.wavelength * geom.focus_focal / (PI * w0),
            prefactor: PI * w0 * w0 / (geom.wavelength * geom.focus_focal),
        }
    }

    /// The interference sum alone, without envelope or prefactor.
    pub fn grating_field(&self, x: f64, y: f64) -> Complex64 {
        let tx = -TAU * x / self.bz;
        let ty = -TAU * y / self.bz;
        let (nx, ny) = self.arr.dims();
        if let Some(r) = self.arr.ramp() {
            r.scale * axis_sum(nx, r.decay.0, r.phase.0 + tx) * axis_sum(ny, r.decay.1, r.phase.1 + ty)
        } else {
            let ey: Vec<Complex64> = (0..ny).map(|j| Complex64::from_polar(1.0, j as f64 * ty)).collect();
            let mut acc = Complex64::default();
            for i in 0..nx {
                let row: Complex64 = (0..ny).map(|j| self.arr.amplitudes[[i, j]] * ey[j]).sum();
                acc += row * Complex64::from_polar(1.0, i as f64 * tx);
            }
            acc
        }
    }

    pub fn envelope(&self, x: f64, y: f64) -> f64 {
        self.prefactor * (-(x * x + y * y) / (self.env_waist * self.env_waist)).exp()
    }

    pub fn field(&self, x: f64, y: f64) -> Complex64 {
        self.grating_field(x, y) * self.envelope(x, y)
    }

    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        self.field(x, y).norm_sqr()
    }

    pub fn sample(&self, window: &FocalWindow) -> FieldGrid {
        let o = window.origin();
        let h = window.spacing;
        let samples = Array2::from_shape_fn(window.n, |(i, j)| self.field(o.0 + i as f64 * h, o.1 + j as f64 * h));
        FieldGrid {
            samples,
            dx: h,
            dy: h,
            origin: o,
            plane_z: 0.0,
        }
    }
}

/// Focal-plane intensity at one point from the closed-form grating sums.
pub fn focal_intensity_analytic(arr: &ArrayField, geom: &RipaGeometry, point: (f64, f64)) -> f64 {
    AnalyticFocal::new(arr, geom).intensity(point.0, point.1)
}

/// Complex focal field sampled on a window from the closed-form sums.
pub fn focal_field_analytic(arr: &ArrayField, geom: &RipaGeometry, window: &FocalWindow) -> FieldGrid {
    AnalyticFocal::new(arr, geom).sample(window)
}

/// Long-exposure image of a tone set: single-tone intensities summed, since
/// distinct tones do not interfere on average.
pub fn static_image(
    tones: &ToneSet,
    geom: &RipaGeometry,
    loss: &LossModel,
    window: &FocalWindow,
) -> Result<IntensityGrid> {
    static_intensity_weights(tones)?;
    let o = window.origin();
    let h = window.spacing;
    let arrays: Vec<ArrayField> = tones.iter().map(|t| synthesize_array(t, geom, loss)).collect();
    let solvers: Vec<AnalyticFocal<'_>> = arrays.iter().map(|a| AnalyticFocal::new(a, geom)).collect();
    let cols: Vec<Vec<f64>> = (0..window.n.0)
        .into_par_iter()
        .map(|i| {
            let x = o.0 + i as f64 * h;
            (0..window.n.1)
                .map(|j| solvers.iter().map(|f| f.intensity(x, o.1 + j as f64 * h)).sum())
                .collect()
        })
        .collect();
    IntensityGrid::new(Array2::from_shape_fn(window.n, |(i, j)| cols[i][j]), h, h, o, 0.0)
}

/// Transverse mode carried by every beam of the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BeamProfile {
    #[default]
    Fundamental,
    /// Hermite-Gaussian of order m along x and n along y.
    HermiteGauss { m: usize, n: usize },
}

/// Array-plane sampling for [`focal_field_numeric`]. The focal spacing is
/// `lambda f / (n * array_dx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericGridSpec {
    pub n: usize,
    pub array_dx: f64,
    /// Keep only focal samples with |x|, |y| <= this.
    pub focal_half_width: Option<f64>,
    pub profile: BeamProfile,
}

/// Largest transform accepted (memory guard).
pub const MAX_FFT_SIZE: usize = 8192;

impl Default for NumericGridSpec {
    fn default() -> Self {
        Self {
            n: 2048,
            array_dx: 32e-6,
            focal_half_width: Some(1.5 * 156e-6),
            profile: BeamProfile::Fundamental,
        }
    }
}

impl NumericGridSpec {
    /// Grid whose focal spacing is at most `focal_dx`, with array spacing
    /// near `w0 / 3.2` and a power-of-two size.
    pub fn for_focal_spacing(geom: &RipaGeometry, focal_dx: f64, half_width: Option<f64>) -> Self {
        let w0 = geom.mode_waist();
        let target_dx = w0 / 3.2;
        let span = geom.wavelength * geom.focus_focal / focal_dx;
        let n = ((span / target_dx).ceil() as usize).next_power_of_two();
        Self {
            n,
            array_dx: span / n as f64,
            focal_half_width: half_width,
            profile: BeamProfile::Fundamental,
        }
    }

    pub fn focal_dx(&self, geom: &RipaGeometry) -> f64 {
        geom.wavelength * geom.focus_focal / (self.n as f64 * self.array_dx)
    }
}

/// Focal field by sampling the array plane and applying a 2D FFT.
///
/// Beam (i, j) is centred at `((i - (N_x-1)/2) p, (j - (N_y-1)/2) p)`, so the
/// result equals the analytic field up to a position-dependent phase.
pub fn focal_field_numeric(arr: &ArrayField, geom: &RipaGeometry, spec: &NumericGridSpec) -> Result<FieldGrid> {
    let n = spec.n;
    let dx = spec.array_dx;
    let w0 = arr.mode_waist;
    let (nx, ny) = arr.dims();
    if !(2..=MAX_FFT_SIZE).contains(&n) {
        return Err(Error::Resource(format!(
            "transform size {n} outside 2..={MAX_FFT_SIZE}"
        )));
    }
    if w0 < 3.0 * dx {
        return Err(Error::Sampling(format!(
            "mode waist {w0:.3e} m is under 3 samples (dx = {dx:.3e} m)"
        )));
    }
    let reach = 5.0 * w0 * (1.0 + spec_order(spec.profile) as f64).sqrt();
    let footprint = (nx.max(ny) - 1) as f64 * arr.pitch + 2.0 * reach;
    if (n as f64) * dx < footprint {
        return Err(Error::Sampling(format!(
            "array window {:.3e} m does not cover footprint plus guard {footprint:.3e} m",
            n as f64 * dx
        )));
    }
    let (mx, my) = match spec.profile {
        BeamProfile::Fundamental => (0, 0),
        BeamProfile::HermiteGauss { m, n } => (m, n),
    };

    // Per-axis beam profiles, stored sparsely as (first index, values).
    let half = (n / 2) as f64;
    let profiles = |count: usize, order: usize| -> Vec<(usize, Vec<f64>)> {
        (0..count)
            .map(|b| {
                let c = (b as f64 - (count as f64 - 1.0) / 2.0) * arr.pitch;
                let lo = (((c - reach) / dx + half).floor().max(0.0)) as usize;
                let hi = ((((c + reach) / dx + half).ceil()) as usize).min(n - 1);
                let vals = (lo..=hi)
                    .map(|k| hermite_gauss(order, (k as f64 - half) * dx - c, w0))
                    .collect();
                (lo, vals)
            })
            .collect()
    };
    let px = profiles(nx, mx);
    let py = profiles(ny, my);

    // Write the array plane directly in FFT (ifftshifted) order.
    let mut data = Array2::<Complex64>::zeros((n, n));
    let shift = n / 2;
    let mut row = vec![Complex64::default(); ny];
    for kx in 0..n {
        let mut any = false;
        row.iter_mut().for_each(|v| *v = Complex64::default());
        for (i, (lo, vals)) in px.iter().enumerate() {
            if kx >= *lo && kx < lo + vals.len() {
                let g = vals[kx - lo];
                for (j, r) in row.iter_mut().enumerate().take(ny) {
                    *r += arr.amplitudes[[i, j]] * g;
                }
                any = true;
            }
        }
        if !any {
            continue;
        }
        let sx = (kx + n - shift) % n;
        for (j, (lo, vals)) in py.iter().enumerate() {
            let t = row[j];
            for (off, &g) in vals.iter().enumerate() {
                let sy = (lo + off + n - shift) % n;
                data[[sx, sy]] += t * g;
            }
        }
    }

    fft2(&mut data, FftDirection::Forward);

    let dxf = geom.wavelength * geom.focus_focal / (n as f64 * dx);
    let scale = dx * dx / (geom.wavelength * geom.focus_focal);
    let keep = match spec.focal_half_width {
        Some(h) => ((h / dxf).floor() as usize).min(shift.saturating_sub(1)),
        None => shift,
    };
    let m = if spec.focal_half_width.is_some() {
        2 * keep + 1
    } else {
        n
    };
    let first = shift - keep;
    let samples = Array2::from_shape_fn((m, m), |(a, b)| {
        // Shifted index q maps to raw bin (q + n - shift) % n.
        let qa = (first + a + n - shift) % n;
        let qb = (first + b + n - shift) % n;
        data[[qa, qb]] * scale
    });
    let origin = -(keep as f64) * dxf;
    FieldGrid::new(samples, dxf, dxf, (origin, origin), 0.0)
}

fn spec_order(p: BeamProfile) -> usize {
    match p {
        BeamProfile::Fundamental => 0,
        BeamProfile::HermiteGauss { m, n } => m.max(n),
    }
}

/// Equivalent Gaussian waist of an n-beam grating peak, L sqrt(6 / (pi^2 (n^2 - 1))).
pub fn gaussian_equiv_waist(n: usize, bz_extent: f64) -> Result<f64> {
    equivalent_waist(n, bz_extent).ok_or_else(|| Error::Argument(format!("need n >= 2, got {n}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotFit {
    pub center: (f64, f64),
    /// 1/e^2 intensity radius along x.
    pub w_x: f64,
    pub w_y: f64,
    pub peak: f64,
    /// RMS residual relative to the fitted peak.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpotFitOptions {
    /// Samples below this fraction of the window maximum are excluded.
    pub core_fraction: f64,
    /// Local maxima below this fraction of the window maximum are ignored
    /// when checking for a unique peak.
    pub peak_floor: f64,
    pub lm: LmOptions,
}

impl Default for SpotFitOptions {
    fn default() -> Self {
        Self {
            core_fraction: (-2.0f64).exp(),
            peak_floor: 0.1,
            lm: LmOptions::default(),
        }
    }
}

/// 2D Gaussian fit `P exp(-2 ((x-x0)^2/w_x^2 + (y-y0)^2/w_y^2))` to the
/// samples within `window_radius` of `window_center`.
pub fn fit_spot(grid: &IntensityGrid, window_center: (f64, f64), window_radius: f64) -> Result<SpotFit> {
    fit_spot_with(grid, window_center, window_radius, &SpotFitOptions::default())
}

pub fn fit_spot_with(
    grid: &IntensityGrid,
    window_center: (f64, f64),
    window_radius: f64,
    opts: &SpotFitOptions,
) -> Result<SpotFit> {
    let (nx, ny) = grid.values.dim();
    let inside = |ix: usize, iy: usize| {
        let (x, y) = (grid.x(ix) - window_center.0, grid.y(iy) - window_center.1);
        x * x + y * y <= window_radius * window_radius
    };
    let mut peak = f64::NEG_INFINITY;
    let mut count = 0;
    for ix in 0..nx {
        for iy in 0..ny {
            if inside(ix, iy) {
                peak = peak.max(grid.values[[ix, iy]]);
                count += 1;
            }
        }
    }
    if count < 6 || !(peak > 0.0) {
        return Err(Error::Argument("fit window holds too few samples or no signal".into()));
    }
    let maxima: Vec<_> = grid
        .local_maxima(opts.peak_floor * peak)
        .into_iter()
        .filter(|&(ix, iy, _)| inside(ix, iy))
        .collect();
    if maxima.len() > 1 {
        return Err(Error::Ambiguous(maxima.len()));
    }

    let mut pts = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let v = grid.values[[ix, iy]];
            if inside(ix, iy) && v >= opts.core_fraction * peak {
                pts.push((
                    (grid.x(ix) - window_center.0) / window_radius,
                    (grid.y(iy) - window_center.1) / window_radius,
                    v / peak,
                ));
            }
        }
    }
    if pts.len() < 6 {
        return Err(Error::Argument("spot core is under-sampled".into()));
    }
    let (cx, cy, _) = *pts.iter().max_by(|a, b| a.2.total_cmp(&b.2)).expect("nonempty");
    let span = |sel: fn(&(f64, f64, f64)) -> f64| {
        let lo = pts.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        ((hi - lo) / 2.0).max(grid.dx.min(grid.dy) / window_radius)
    };
    let p0 = [1.0, cx, cy, span(|p| p.0), span(|p| p.1)];
    let res = levenberg_marquardt(
        |p, out| {
            for (o, &(x, y, v)) in out.iter_mut().zip(&pts) {
                let u = (x - p[1]) / p[3];
                let w = (y - p[2]) / p[4];
                *o = p[0] * (-2.0 * (u * u + w * w)).exp() - v;
            }
        },
        &p0,
        pts.len(),
        &opts.lm,
    )?;
    let p = &res.params;
    let fit_peak = p[0] * peak;
    Ok(SpotFit {
        center: (
            window_center.0 + p[1] * window_radius,
            window_center.1 + p[2] * window_radius,
        ),
        w_x: p[3].abs() * window_radius,
        w_y: p[4].abs() * window_radius,
        peak: fit_peak,
        residual: (res.cost / pts.len() as f64).sqrt() / p[0].abs(),
    })
}

/// Largest |z| for which the angular-spectrum transfer function is
/// adequately sampled on a grid of `n` samples at spacing `dx`.
pub fn propagation_limit(n: usize, dx: f64, wavelength: f64) -> f64 {
    let q = wavelength / (2.0 * dx);
    if q >= 1.0 {
        return 0.0;
    }
    n as f64 * dx * dx / wavelength * (1.0 - q * q).sqrt()
}

/// Angular-spectrum propagation by `z` (positive downstream).
pub fn propagate_axial(focal: &FieldGrid, z: f64, wavelength: f64) -> Result<FieldGrid> {
    let (nx, ny) = focal.samples.dim();
    for (n, d) in [(nx, focal.dx), (ny, focal.dy)] {
        if wavelength / (2.0 * d) >= 1.0 {
            return Err(Error::Sampling(format!("spacing {d:.3e} m is below lambda/2")));
        }
        let lim = propagation_limit(n, d, wavelength);
        if z.abs() > lim {
            return Err(Error::Sampling(format!(
                "|z| = {:.3e} m exceeds the band limit {lim:.3e} m of this grid",
                z.abs()
            )));
        }
    }
    if z == 0.0 {
        return Ok(focal.clone());
    }
    // Circular shifts commute with the propagation kernel, so the samples
    // can be transformed in place without recentring.
    let mut data = focal.samples.clone();
    fft2(&mut data, FftDirection::Forward);
    let k = TAU / wavelength;
    let inv_l2 = 1.0 / (wavelength * wavelength);
    let dfx = 1.0 / (nx as f64 * focal.dx);
    let dfy = 1.0 / (ny as f64 * focal.dy);
    let fy2: Vec<f64> = (0..ny).map(|b| (freq_index(b, ny) * dfy).powi(2)).collect();
    let norm = 1.0 / (nx * ny) as f64;
    for a in 0..nx {
        let fx2 = (freq_index(a, nx) * dfx).powi(2);
        for b in 0..ny {
            let kz = TAU * (inv_l2 - fx2 - fy2[b]).sqrt();
            data[[a, b]] *= Complex64::from_polar(norm, (kz - k) * z);
        }
    }
    fft2(&mut data, FftDirection::Inverse);
    let samples = data;
    Ok(FieldGrid {
        samples,
        dx: focal.dx,
        dy: focal.dy,
        origin: focal.origin,
        plane_z: focal.plane_z + z,
    })
}

/// |dz_RIPA / dz_AOD| = (1/sqrt6) tau_RIPA / tau_AOD.
pub fn lensing_ratio(tau_ripa: f64, tau_aod: f64) -> Result<f64> {
    if !(tau_aod > 0.0) || tau_ripa < 0.0 {
        return Err(Error::Argument("delays must be positive".into()));
    }
    Ok(tau_ripa / (tau_aod * 6f64.sqrt()))
}

/// Total second-stage delay N_x L_rt,2 / c.
pub fn ripa_delay(geom: &RipaGeometry) -> f64 {
    geom.n_cols as f64 * geom.roundtrip_2 / SPEED_OF_LIGHT
}

/// Focal shift from the quadratic column phase of a linear chirp:
/// the chirp acts as a cylindrical lens along x, giving dz = -rate tau_2^2 L^2 / lambda.
pub fn chirp_defocus_analytic(geom: &RipaGeometry, sweep_rate: f64) -> f64 {
    let tau = geom.delay_2();
    let l = geom.bz_extent();
    -sweep_rate * tau * tau * l * l / geom.wavelength
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChirpOptions {
    pub grid: NumericGridSpec,
    /// Number of planes in the coarse axial scan before refinement.
    pub scan_points: usize,
}

impl ChirpOptions {
    pub fn for_geometry(geom: &RipaGeometry) -> Self {
        let mut grid = NumericGridSpec::for_focal_spacing(geom, 4.5e-6, None);
        grid.n = grid.n.min(1024);
        grid.array_dx = geom.wavelength * geom.focus_focal / (grid.n as f64 * 4.5e-6);
        grid.focal_half_width = Some(2.5 * geom.envelope_waist());
        Self { grid, scan_points: 41 }
    }
}

/// Axial focal shift of a linearly chirped single tone, found numerically.
///
/// The array is frozen mid-sweep from the time-domain envelope (each column
/// sees the drive at its retarded time), transformed with the FFT solver and
/// propagated. The chirp lens is cylindrical (x only), so the focus is taken
/// as the plane maximising the peak of the y-integrated intensity profile.
pub fn chirp_defocus_numeric(geom: &RipaGeometry, loss: &LossModel, sweep_rate: f64) -> Result<f64> {
    chirp_defocus_numeric_with(geom, loss, sweep_rate, &ChirpOptions::for_geometry(geom))
}

pub fn chirp_defocus_numeric_with(
    geom: &RipaGeometry,
    loss: &LossModel,
    sweep_rate: f64,
    opts: &ChirpOptions,
) -> Result<f64> {
    if !sweep_rate.is_finite() {
        return Err(Error::Argument("sweep rate must be finite".into()));
    }
    let arr = crate::time::chirped_array(geom, loss, sweep_rate)?;
    let focal = focal_field_numeric(&arr, geom, &opts.grid)?;
    let (n, _) = focal.samples.dim();
    let zmax = 0.9 * propagation_limit(n, focal.dx, geom.wavelength);

    let score = |z: f64| -> Result<f64> {
        let f = propagate_axial(&focal, z, geom.wavelength)?;
        let profile: Vec<f64> = f
            .samples
            .outer_iter()
            .map(|row| row.iter().map(|v| v.norm_sqr()).sum())
            .collect();
        Ok(peak_1d(&profile))
    };

    let m = opts.scan_points.max(5);
    let zs: Vec<f64> = (0..m).map(|k| -zmax + 2.0 * zmax * k as f64 / (m - 1) as f64).collect();
    let vals = zs.iter().map(|&z| score(z)).collect::<Result<Vec<_>>>()?;
    let best = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("nonempty scan");
    let step = zs[1] - zs[0];
    let (mut a, mut b) = ((zs[best] - step).max(-zmax), (zs[best] + step).min(zmax));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (score(c)?, score(d)?);
    while (b - a) > 1e-7 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = score(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Parabolic sub-sample maximum of a sampled profile.
fn peak_1d(v: &[f64]) -> f64 {
    let (k, &c) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty profile");
    if k == 0 || k + 1 == v.len() {
        return c;
    }
    let (m, p) = (v[k - 1], v[k + 1]);
    let den = m - 2.0 * c + p;
    if den >= 0.0 {
        return c;
    }
    let d = 0.5 * (m - p) / den;
    c - 0.25 * (m - p) * d
}

/// Brightest point of the intensity over the first Brillouin zone.
///
/// A coarse scan is refined by repeatedly zooming a 9 x 9 grid around the
/// current best point.
pub fn peak_in_zone(arr: &ArrayField, geom: &RipaGeometry) -> (f64, f64, f64) {
    let f = AnalyticFocal::new(arr, geom);
    let l = geom.bz_extent();
    let (nx, ny) = arr.dims();
    let coarse = 4 * nx.max(ny).max(8);
    let h = l / coarse as f64;
    let best = (0..coarse)
        .into_par_iter()
        .map(|a| {
            let x = -l / 2.0 + (a as f64 + 0.5) * h;
            (0..coarse)
                .map(|b| {
                    let y = -l / 2.0 + (b as f64 + 0.5) * h;
                    (x, y, f.intensity(x, y))
                })
                .fold(
                    (0.0, 0.0, f64::NEG_INFINITY),
                    |acc, v| if v.2 > acc.2 { v } else { acc },
                )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(
            (0.0, 0.0, f64::NEG_INFINITY),
            |acc, v| if v.2 > acc.2 { v } else { acc },
        );
    let (mut x, mut y, mut v) = best;
    let mut step = h;
    for _ in 0..40 {
        let mut cand = (x, y, v);
        for a in -4..=4 {
            for b in -4..=4 {
                let (px, py) = (x + a as f64 * step / 4.0, y + b as f64 * step / 4.0);
                let val = f.intensity(px, py);
                if val > cand.2 {
                    cand = (px, py, val);
                }
            }
        }
        (x, y, v) = cand;
        step /= 4.0;
        if step < 1e-15 {
            break;
        }
    }
    (x, y, v)
}

/// Crop of a grid to the index ranges `[x0, x1) x [y0, y1)`.
pub fn crop(grid: &FieldGrid, x: std::ops::Range<usize>, y: std::ops::Range<usize>) -> FieldGrid {
    FieldGrid {
        samples: grid.samples.slice(s![x.clone(), y.clone()]).to_owned(),
        dx: grid.dx,
        dy: grid.dy,
        origin: (grid.x(x.start), grid.y(y.start)),
        plane_z: grid.plane_z,
    }
}
