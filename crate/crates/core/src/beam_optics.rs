//! Paraxial ray matrices, the lens-guide eigenmode, clipping loss and the
//! suppression of misaligned Hermite-Gaussian modes in the focal plane.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RipaGeometry;
use crate::error::{Error, Result};
use crate::focal::axis_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl RayMatrix {
    pub const IDENTITY: RayMatrix = RayMatrix {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
    };

    pub fn free(distance: f64) -> Self {
        Self {
            b: distance,
            ..Self::IDENTITY
        }
    }

    pub fn thin_lens(focal: f64) -> Self {
        Self {
            c: -1.0 / focal,
            ..Self::IDENTITY
        }
    }

    /// Half-path, lens, half-path: one round trip of a lens guide.
    pub fn lens_guide(roundtrip: f64, focal: f64) -> Self {
        compose(&[
            Self::free(roundtrip / 2.0),
            Self::thin_lens(focal),
            Self::free(roundtrip / 2.0),
        ])
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// `self * rhs`: `rhs` acts first.
    pub fn then_after(&self, rhs: &RayMatrix) -> RayMatrix {
        RayMatrix {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }

    pub fn half_trace(&self) -> f64 {
        (self.a + self.d) / 2.0
    }

    pub fn is_stable(&self) -> bool {
        self.half_trace().abs() < 1.0
    }

    /// Apply to a complex beam parameter: (A q + B) / (C q + D).
    pub fn transform(&self, q: Complex64) -> Complex64 {
        (self.a * q + self.b) / (self.c * q + self.d)
    }
}

/// Product of elements in propagation order (the first element acts first).
pub fn compose(elements: &[RayMatrix]) -> RayMatrix {
    elements.iter().fold(RayMatrix::IDENTITY, |acc, m| m.then_after(&acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBeamParam {
    pub q: Complex64,
}

impl GaussianBeamParam {
    pub fn is_physical(&self) -> bool {
        self.q.im > 0.0
    }

    /// Waist radius sqrt(lambda Im(q) / pi).
    pub fn waist(&self, wavelength: f64) -> f64 {
        (wavelength * self.q.im / PI).sqrt()
    }

    pub fn rayleigh_range(&self) -> f64 {
        self.q.im
    }
}

/// Self-consistent q of a periodic system, q = (A q + B) / (C q + D).
pub fn eigen_q(m: &RayMatrix) -> Result<GaussianBeamParam> {
    let half_trace = m.half_trace();
    if half_trace.abs() >= 1.0 || m.c == 0.0 {
        return Err(Error::Unstable { half_trace });
    }
    let disc = Complex64::new((m.a + m.d).powi(2) - 4.0, 0.0).sqrt();
    let q1 = ((m.a - m.d) + disc) / (2.0 * m.c);
    let q2 = ((m.a - m.d) - disc) / (2.0 * m.c);
    let q = if q1.im > 0.0 { q1 } else { q2 };
    Ok(GaussianBeamParam { q })
}

/// Round-trip Gouy phase 2 atan(L_rt / 2 / Im q).
pub fn gouy_roundtrip(q: &GaussianBeamParam, l_rt: f64) -> f64 {
    2.0 * (l_rt / 2.0 / q.q.im).atan()
}

/// Power fraction beyond a pupil of diameter `pupil_d`,
/// exp(-2 (d/2)^2 / (sqrt2 w0)^2).
pub fn clipping_loss(w0: f64, pupil_d: f64) -> f64 {
    let r = pupil_d / 2.0;
    (-2.0 * r * r / (2.0 * w0 * w0)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HgSuppressionStats {
    pub s_min: f64,
    pub s_max: f64,
    pub s_mean: f64,
}

/// Which first-order mode leaks into the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OddAxis {
    X,
    Y,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgOptions {
    /// Gouy phase of the first-order mode relative to the fundamental,
    /// accumulated per round trip in either stage.
    pub gouy_per_roundtrip: f64,
    pub odd_axis: OddAxis,
    /// Integration samples per axis over the first Brillouin zone.
    pub integration_points: usize,
}

impl Default for HgOptions {
    fn default() -> Self {
        Self {
            gouy_per_roundtrip: FRAC_PI_2,
            odd_axis: OddAxis::Y,
            integration_points: 201,
        }
    }
}

/// Cell-centred `n x n` positions spanning the first Brillouin zone.
pub fn zone_positions(geom: &RipaGeometry, n: usize) -> Vec<(f64, f64)> {
    let l = geom.bz_extent();
    let c: Vec<f64> = (0..n).map(|k| ((k as f64 + 0.5) / n as f64 - 0.5) * l).collect();
    c.iter().flat_map(|&x| c.iter().map(move |&y| (x, y))).collect()
}

/// Ratio S = int |E_00|^2 / int |E_01|^2 over the first zone for each
/// addressed position.
///
/// Both arrays share the phase ramp of the addressed spot. The odd mode
/// additionally picks up the Gouy phase on every round trip, and its focal
/// profile is the same Hermite-Gaussian at the envelope waist.
pub fn hg_suppression(geom: &RipaGeometry, positions: &[(f64, f64)], opts: &HgOptions) -> Result<HgSuppressionStats> {
    if positions.is_empty() {
        return Err(Error::Argument("no sample positions".into()));
    }
    let values = hg_suppression_values(geom, positions, opts)?;
    let s_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s_mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(HgSuppressionStats { s_min, s_max, s_mean })
}

/// Per-position suppression factors in the order of `positions`.
pub fn hg_suppression_values(geom: &RipaGeometry, positions: &[(f64, f64)], opts: &HgOptions) -> Result<Vec<f64>> {
    let l = geom.bz_extent();
    if let Some(p) = positions.iter().find(|p| p.0.abs() > l / 2.0 || p.1.abs() > l / 2.0) {
        return Err(Error::Range(format!("position {p:?} outside the first Brillouin zone")));
    }
    let n = opts.integration_points.max(3);
    let we = geom.envelope_waist();
    let g: Vec<f64> = (0..n).map(|k| ((k as f64 + 0.5) / n as f64 - 0.5) * l).collect();
    let env: Vec<f64> = g.iter().map(|v| (-v * v / (we * we)).exp()).collect();
    let odd: Vec<f64> = g.iter().map(|v| 2.0 * v / we).collect();
    let (nx, ny) = (geom.n_cols, geom.n_rows);
    let gouy = opts.gouy_per_roundtrip;

    Ok(positions
        .par_iter()
        .map(|&(x0, y0)| {
            let (px, py) = (TAU * x0 / l, TAU * y0 / l);
            let axis = |n: usize, phi: f64| -> Vec<f64> {
                g.iter()
                    .map(|v| axis_sum(n, 1.0, phi - TAU * v / l).norm_sqr())
                    .collect()
            };
            let (fx0, fy0) = (axis(nx, px), axis(ny, py));
            let (fx1, fy1) = (axis(nx, px + gouy), axis(ny, py + gouy));
            // Separable integrals: |E|^2 = env^2 * hx * gx * hy * gy.
            let integral = |fx: &[f64], fy: &[f64], odd_x: bool, odd_y: bool| {
                let sx: f64 = (0..n)
                    .map(|k| env[k] * env[k] * fx[k] * if odd_x { odd[k] * odd[k] } else { 1.0 })
                    .sum();
                let sy: f64 = (0..n)
                    .map(|k| env[k] * env[k] * fy[k] * if odd_y { odd[k] * odd[k] } else { 1.0 })
                    .sum();
                sx * sy
            };
            let e00 = integral(&fx0, &fy0, false, false);
            let e01 = match opts.odd_axis {
                OddAxis::Y => integral(&fx1, &fy1, false, true),
                OddAxis::X => integral(&fx1, &fy1, true, false),
            };
            e00 / e01
        })
        .collect())
}

/// First-order odd-mode focal field at a point (envelope-scaled, no prefactor).
pub fn odd_mode_field(geom: &RipaGeometry, spot: (f64, f64), point: (f64, f64), opts: &HgOptions) -> Complex64 {
    let l = geom.bz_extent();
    let we = geom.envelope_waist();
    let (x, y) = point;
    let env = (-(x * x + y * y) / (we * we)).exp();
    let h = match opts.odd_axis {
        OddAxis::Y => 2.0 * y / we,
        OddAxis::X => 2.0 * x / we,
    };
    let px = TAU * spot.0 / l + opts.gouy_per_roundtrip;
    let py = TAU * spot.1 / l + opts.gouy_per_roundtrip;
    env * h * axis_sum(geom.n_cols, 1.0, px - TAU * x / l) * axis_sum(geom.n_rows, 1.0, py - TAU * y / l)
}

/// Lens-guide stability summary used by the `stability` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub roundtrip: f64,
    pub focal: f64,
    pub matrix: RayMatrix,
    pub half_trace: f64,
    pub stable: bool,
    pub q_imag: Option<f64>,
    pub waist: Option<f64>,
    pub gouy_roundtrip: Option<f64>,
    pub gouy_per_pass: Option<f64>,
    pub clipping_loss_500um: Option<f64>,
}

pub fn stability_report(roundtrip: f64, focal: f64, wavelength: f64) -> StabilityReport {
    let m = RayMatrix::lens_guide(roundtrip, focal);
    let q = eigen_q(&m).ok();
    let waist = q.map(|q| q.waist(wavelength));
    let gouy = q.map(|q| gouy_roundtrip(&q, roundtrip));
    StabilityReport {
        roundtrip,
        focal,
        matrix: m,
        half_trace: m.half_trace(),
        stable: m.is_stable(),
        q_imag: q.map(|q| q.q.im),
        waist,
        gouy_roundtrip: gouy,
        gouy_per_pass: gouy.map(|g| g / 2.0),
        clipping_loss_500um: waist.map(|w| clipping_loss(w, 500e-6)),
    }
}
