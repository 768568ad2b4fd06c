//! Simulated interferometric phase calibration: aberration injection,
//! two-beam fringe fitting, affine beam-to-pixel mapping and closed-loop
//! verification of the resulting mask.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::array::{synthesize_array, ArrayField, Tone};
use crate::config::{LossModel, RipaGeometry};
use crate::error::{Error, Result};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::focal::{peak_in_zone, FieldGrid, FocalWindow};
use crate::wrap_phase;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AberrationModel {
    /// Independent phases uniform in [-amplitude, amplitude].
    RandomUniform { amplitude: f64 },
    /// Random tilt plus quadratic surface over the array, peak |phase| = amplitude.
    SmoothLowOrder { amplitude: f64 },
}

/// Per-beam phase errors, indexed `[i, j]`, wrapped to [-pi, pi).
#[derive(Debug, Clone, PartialEq)]
pub struct AberrationField {
    pub per_beam_phase: Array2<f64>,
    pub seed: u64,
    pub model: AberrationModel,
}

impl AberrationField {
    pub fn zero(geom: &RipaGeometry) -> Self {
        Self {
            per_beam_phase: Array2::zeros((geom.n_cols, geom.n_rows)),
            seed: 0,
            model: AberrationModel::RandomUniform { amplitude: 0.0 },
        }
    }

    /// Same field with a constant added to every phase.
    pub fn offset(&self, delta: f64) -> Self {
        Self {
            per_beam_phase: self.per_beam_phase.mapv(|p| wrap_phase(p + delta)),
            ..self.clone()
        }
    }
}

pub fn inject_aberrations(geom: &RipaGeometry, model: AberrationModel, seed: u64) -> AberrationField {
    let (nx, ny) = (geom.n_cols, geom.n_rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match model {
        AberrationModel::RandomUniform { amplitude } => {
            let a = amplitude.abs();
            Array2::from_shape_fn((nx, ny), |_| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 })
        }
        AberrationModel::SmoothLowOrder { amplitude } => {
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let norm = |k: usize, n: usize| {
                if n > 1 {
                    2.0 * k as f64 / (n - 1) as f64 - 1.0
                } else {
                    0.0
                }
            };
            let surf = Array2::from_shape_fn((nx, ny), |(i, j)| {
                let (u, v) = (norm(i, nx), norm(j, ny));
                c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v
            });
            let peak = surf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                surf.mapv(|s| amplitude * s / peak)
            } else {
                surf
            }
        }
    };
    AberrationField {
        per_beam_phase: raw.mapv(wrap_phase),
        seed,
        model,
    }
}

fn check_pair(
    geom: &RipaGeometry,
    aberr: &AberrationField,
    beam: (usize, usize),
    reference: (usize, usize),
) -> Result<()> {
    if beam == reference {
        return Err(Error::Argument("fringe pair needs two distinct beams".into()));
    }
    let dims = (geom.n_cols, geom.n_rows);
    if aberr.per_beam_phase.dim() != dims {
        return Err(Error::Shape(format!(
            "aberration field {:?} does not match array {dims:?}",
            aberr.per_beam_phase.dim()
        )));
    }
    if beam.0 >= dims.0 || beam.1 >= dims.1 || reference.0 >= dims.0 || reference.1 >= dims.1 {
        return Err(Error::Argument(format!("beam index outside {dims:?}")));
    }
    Ok(())
}

fn pair_field(
    geom: &RipaGeometry,
    aberr: &AberrationField,
    beam: (usize, usize),
    reference: (usize, usize),
    p: (f64, f64),
) -> Complex64 {
    let l = geom.bz_extent();
    let one = |b: (usize, usize)| {
        Complex64::from_polar(
            1.0,
            aberr.per_beam_phase[[b.0, b.1]] - TAU * (b.0 as f64 * p.0 + b.1 as f64 * p.1) / l,
        )
    };
    one(beam) + one(reference)
}

/// Focal field of beam `pair.0` and reference `pair.1` alone, both at unit
/// amplitude, on a sampling window.
pub fn fringe_pattern(
    geom: &RipaGeometry,
    aberr: &AberrationField,
    pair: ((usize, usize), (usize, usize)),
    grid: &FocalWindow,
) -> Result<FieldGrid> {
    check_pair(geom, aberr, pair.0, pair.1)?;
    let w0 = geom.mode_waist();
    let we = geom.envelope_waist();
    let pref = PI * w0 * w0 / (geom.wavelength * geom.focus_focal);
    let o = grid.origin();
    let h = grid.spacing;
    let samples = Array2::from_shape_fn(grid.n, |(a, b)| {
        let p = (o.0 + a as f64 * h, o.1 + b as f64 * h);
        pair_field(geom, aberr, pair.0, pair.1, p) * pref * (-(p.0 * p.0 + p.1 * p.1) / (we * we)).exp()
    });
    FieldGrid::new(samples, h, h, o, 0.0)
}

/// Samples along a straight line through the focal origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineCut {
    pub s: Vec<f64>,
    pub values: Vec<f64>,
}

/// Intensity along the line from the beam towards the reference, flat-fielded
/// by the Gaussian envelope. Covers `periods` fringe periods centred on the
/// origin, so the fitted phase is referenced to a fixed coordinate origin.
pub fn fringe_line_cut(
    geom: &RipaGeometry,
    aberr: &AberrationField,
    pair: ((usize, usize), (usize, usize)),
    n_samples: usize,
    periods: f64,
) -> Result<LineCut> {
    check_pair(geom, aberr, pair.0, pair.1)?;
    let (b, r) = pair;
    let dir = (r.0 as f64 - b.0 as f64, r.1 as f64 - b.1 as f64);
    let len = dir.0.hypot(dir.1);
    let (ux, uy) = (dir.0 / len, dir.1 / len);
    let period = geom.bz_extent() / len;
    let half = 0.5 * periods * period;
    let n = n_samples.max(8);
    let s: Vec<f64> = (0..n).map(|k| -half + 2.0 * half * k as f64 / n as f64).collect();
    let values = s
        .iter()
        .map(|&t| pair_field(geom, aberr, b, r, (t * ux, t * uy)).norm_sqr())
        .collect();
    Ok(LineCut { s, values })
}

/// Parameters of I(s) = I0 (1 + gamma cos(2 pi f s + phi)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub i0: f64,
    pub gamma: f64,
    pub freq: f64,
    pub phase: f64,
}

pub const DEFAULT_CONTRAST_FLOOR: f64 = 0.05;

fn fringe_model(p: &[f64], s: f64) -> f64 {
    p[0] * (1.0 + p[1] * (TAU * p[2] * s + p[3]).cos())
}

/// Nonlinear least-squares fringe fit, initialised from the dominant
/// nonzero bin of a zero-padded spectrum.
pub fn fit_fringe(cut: &LineCut, contrast_floor: f64) -> Result<FringeFit> {
    let n = cut.s.len();
    if n < 8 || cut.values.len() != n {
        return Err(Error::Argument("line cut needs at least 8 matching samples".into()));
    }
    let ds = (cut.s[n - 1] - cut.s[0]) / (n - 1) as f64;
    if !(ds > 0.0) {
        return Err(Error::Argument("line cut coordinates must increase".into()));
    }
    let mean = cut.values.iter().sum::<f64>() / n as f64;
    if !(mean > 0.0) {
        return Err(Error::LowContrast(0.0));
    }
    let m = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = cut.values.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    buf.resize(m, Complex64::default());
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let mag: Vec<f64> = buf[..m / 2].iter().map(|c| c.norm()).collect();
    let k = (1..m / 2 - 1)
        .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
        .ok_or_else(|| Error::Argument("line cut too short".into()))?;
    let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den.abs() > 0.0 { 0.5 * (a - c) / den } else { 0.0 };
    let f0 = (k as f64 + shift) / (m as f64 * ds);
    let span = n as f64 * ds;
    if f0 * span < 2.0 {
        return Err(Error::Argument(format!(
            "line cut holds {:.2} fringe periods, need at least 2",
            f0 * span
        )));
    }
    let proj: Complex64 = cut
        .s
        .iter()
        .zip(&cut.values)
        .map(|(&s, &v)| (v - mean) * Complex64::from_polar(1.0, -TAU * f0 * s))
        .sum();
    let gamma0 = 2.0 * proj.norm() / (n as f64 * mean);
    let p0 = [mean, gamma0.max(1e-3), f0, proj.arg()];
    let fit = levenberg_marquardt(
        |p, out| {
            for ((o, &s), &v) in out.iter_mut().zip(&cut.s).zip(&cut.values) {
                *o = fringe_model(p, s) - v;
            }
        },
        &p0,
        n,
        &LmOptions::default(),
    )?;
    let p = &fit.params;
    let (mut gamma, mut phase) = (p[1], p[3]);
    if gamma < 0.0 {
        gamma = -gamma;
        phase += PI;
    }
    if gamma < contrast_floor {
        return Err(Error::LowContrast(gamma));
    }
    Ok(FringeFit {
        i0: p[0],
        gamma,
        freq: p[2],
        phase: wrap_phase(phase),
    })
}

/// Beam index (i, j) to SLM pixel position: `linear * (i, j) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
    /// RMS per-coordinate residual of the fit.
    pub residual: f64,
}

impl AffineMap {
    pub fn apply(&self, index: (f64, f64)) -> (f64, f64) {
        let l = &self.linear;
        (
            l[0][0] * index.0 + l[0][1] * index.1 + self.offset[0],
            l[1][0] * index.0 + l[1][1] * index.1 + self.offset[1],
        )
    }
}

/// Beam index paired with its measured pixel position.
pub type Anchor = ((usize, usize), (f64, f64));

/// Least-squares affine fit of pixel positions against beam indices.
pub fn solve_affine(pairs: &[Anchor]) -> Result<AffineMap> {
    if pairs.len() < 3 {
        return Err(Error::Rank(format!("{} anchor points, need 3", pairs.len())));
    }
    let n = pairs.len();
    let design = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => pairs[r].0 .0 as f64,
        1 => pairs[r].0 .1 as f64,
        _ => 1.0,
    });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::Rank("anchor indices are collinear".into()));
    }
    let px = DVector::from_iterator(n, pairs.iter().map(|p| p.1 .0));
    let py = DVector::from_iterator(n, pairs.iter().map(|p| p.1 .1));
    let cx = svd.solve(&px, 1e-12).map_err(|e| Error::Rank(e.into()))?;
    let cy = svd.solve(&py, 1e-12).map_err(|e| Error::Rank(e.into()))?;
    let rx = &design * &cx - &px;
    let ry = &design * &cy - &py;
    let residual = ((rx.norm_squared() + ry.norm_squared()) / (2 * n) as f64).sqrt();
    Ok(AffineMap {
        linear: [[cx[0], cx[1]], [cy[0], cy[1]]],
        offset: [cx[2], cy[2]],
        residual,
    })
}

/// Per-beam correction applied modulo 2 pi; zero at the reference beam.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    pub per_beam_correction: Array2<f64>,
    pub reference_index: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub reference: (usize, usize),
    pub samples: usize,
    pub periods: f64,
    pub contrast_floor: f64,
    /// Additive Gaussian noise on the cuts, relative to the mean intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            reference: (0, 0),
            samples: 256,
            periods: 4.0,
            contrast_floor: DEFAULT_CONTRAST_FLOOR,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub mask: PhaseMask,
    pub strehl_before: f64,
    pub strehl_after: f64,
    /// Fitted fringe for every beam except the reference, row-major.
    pub fits: Vec<((usize, usize), FringeFit)>,
}

/// Peak of the focal intensity relative to the error-free uniform array.
pub fn strehl(arr: &ArrayField, geom: &RipaGeometry) -> f64 {
    let ideal = synthesize_array(&Tone::at(0.0), geom, &LossModel::lossless());
    peak_in_zone(arr, geom).2 / peak_in_zone(&ideal, geom).2
}

pub fn calibrate_and_verify(geom: &RipaGeometry, aberr: &AberrationField) -> Result<CalibrationReport> {
    calibrate_and_verify_with(geom, aberr, &CalibrationOptions::default())
}

pub fn calibrate_and_verify_with(
    geom: &RipaGeometry,
    aberr: &AberrationField,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    let (nx, ny) = (geom.n_cols, geom.n_rows);
    if aberr.per_beam_phase.dim() != (nx, ny) {
        return Err(Error::Shape("aberration field does not match the array".into()));
    }
    let r = opts.reference;
    let beams: Vec<(usize, usize)> = (0..nx)
        .flat_map(|i| (0..ny).map(move |j| (i, j)))
        .filter(|&b| b != r)
        .collect();
    let results: Vec<Result<FringeFit>> = beams
        .par_iter()
        .enumerate()
        .map(|(k, &b)| {
            let mut cut = fringe_line_cut(geom, aberr, (b, r), opts.samples, opts.periods)?;
            if opts.noise > 0.0 {
                let mean = cut.values.iter().sum::<f64>() / cut.values.len() as f64;
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
                let dist = Normal::new(0.0, opts.noise * mean).map_err(|e| Error::Argument(e.to_string()))?;
                cut.values.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
            }
            fit_fringe(&cut, opts.contrast_floor)
        })
        .collect();

    let mut fits = Vec::with_capacity(beams.len());
    let mut failed = Vec::new();
    let mut first = None;
    for (b, res) in beams.into_iter().zip(results) {
        match res {
            Ok(f) => fits.push((b, f)),
            Err(e) => {
                failed.push(b);
                first.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first {
        return Err(Error::Calibration {
            beams: failed,
            first: Box::new(e),
        });
    }

    let mut correction = Array2::zeros((nx, ny));
    for (b, f) in &fits {
        correction[[b.0, b.1]] = -f.phase;
    }
    let ideal = synthesize_array(&Tone::at(0.0), geom, &LossModel::lossless());
    let before = ideal.with_phase_errors(&aberr.per_beam_phase)?;
    let total = &aberr.per_beam_phase + &correction;
    let after = ideal.with_phase_errors(&total.mapv(wrap_phase))?;
    Ok(CalibrationReport {
        mask: PhaseMask {
            per_beam_correction: correction,
            reference_index: r,
        },
        strehl_before: strehl(&before, geom),
        strehl_after: strehl(&after, geom),
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper() -> RipaGeometry {
        RipaGeometry::default()
    }

    #[test]
    fn seeded_and_zero() {
        let g = paper();
        let m = AberrationModel::RandomUniform { amplitude: PI };
        assert_eq!(inject_aberrations(&g, m, 7), inject_aberrations(&g, m, 7));
        assert_ne!(inject_aberrations(&g, m, 7), inject_aberrations(&g, m, 8));
        let z = inject_aberrations(&g, AberrationModel::SmoothLowOrder { amplitude: 0.0 }, 3);
        assert!(z.per_beam_phase.iter().all(|&p| p == 0.0));
        let f = inject_aberrations(&g, m, 1);
        assert!(f.per_beam_phase.iter().all(|p| (-PI..PI).contains(p)));
    }

    #[test]
    fn adjacent_fringe_period() {
        let g = paper();
        let z = AberrationField::zero(&g);
        let cut = fringe_line_cut(&g, &z, ((1, 0), (0, 0)), 256, 4.0).unwrap();
        let f = fit_fringe(&cut, DEFAULT_CONTRAST_FLOOR).unwrap();
        assert!((1.0 / f.freq / g.bz_extent() - 1.0).abs() < 1e-9);
        assert!(f.phase.abs() < 1e-9);
        assert!((f.gamma - 1.0).abs() < 1e-9);
        let win = FocalWindow::new((0.0, 0.0), 2e-6, 16);
        assert!(fringe_pattern(&g, &z, ((1, 1), (0, 0)), &win).is_ok());
        assert!(fringe_pattern(&g, &z, ((0, 0), (0, 0)), &win).is_err());
    }

    #[test]
    fn fitted_phase_is_the_injected_difference() {
        let g = paper();
        let mut a = AberrationField::zero(&g);
        a.per_beam_phase[[3, 2]] = PI / 3.0;
        let cut = fringe_line_cut(&g, &a, ((3, 2), (0, 0)), 256, 4.0).unwrap();
        let f = fit_fringe(&cut, DEFAULT_CONTRAST_FLOOR).unwrap();
        assert!((f.phase - PI / 3.0).abs() < 1e-3);
    }

    #[test]
    fn synthetic_fringe_exact() {
        let s: Vec<f64> = (0..300).map(|k| k as f64 * 0.01).collect();
        for &(gamma, phi) in &[(0.7, 0.4), (1.0, -PI / 2.0)] {
            let values = s
                .iter()
                .map(|&x| 2.5 * (1.0 + gamma * (TAU * 1.7 * x + phi).cos()))
                .collect();
            let f = fit_fringe(&LineCut { s: s.clone(), values }, 0.05).unwrap();
            assert!((f.i0 / 2.5 - 1.0).abs() < 1e-6);
            assert!((f.gamma / gamma - 1.0).abs() < 1e-6);
            assert!((f.freq / 1.7 - 1.0).abs() < 1e-6);
            assert!((f.phase - phi).abs() < 1e-6);
        }
        let flat = LineCut {
            s: s.clone(),
            values: s.iter().map(|&x| 1.0 + 0.01 * (TAU * 1.7 * x).cos()).collect(),
        };
        assert!(matches!(fit_fringe(&flat, 0.05), Err(Error::LowContrast(_))));
    }

    #[test]
    fn affine_from_three_anchors() {
        let truth = AffineMap {
            linear: [[12.0, 0.5], [-0.3, 11.0]],
            offset: [40.0, 25.0],
            residual: 0.0,
        };
        let pts: Vec<_> = [(0, 0), (0, 8), (7, 0)]
            .iter()
            .map(|&(i, j)| ((i, j), truth.apply((i as f64, j as f64))))
            .collect();
        let m = solve_affine(&pts).unwrap();
        assert!(m.residual < 1e-9);
        for r in 0..2 {
            for c in 0..2 {
                assert!((m.linear[r][c] - truth.linear[r][c]).abs() < 1e-9);
            }
            assert!((m.offset[r] - truth.offset[r]).abs() < 1e-9);
        }
        let line: Vec<_> = (0..4).map(|k| ((k, k), (k as f64, k as f64))).collect();
        assert!(matches!(solve_affine(&line), Err(Error::Rank(_))));
    }

    #[test]
    fn zero_aberration_closed_loop() {
        let g = paper();
        let rep = calibrate_and_verify(&g, &AberrationField::zero(&g)).unwrap();
        assert!(rep.mask.per_beam_correction.iter().all(|p| p.abs() < 1e-9));
        assert!((rep.strehl_before - 1.0).abs() < 1e-9);
        assert!((rep.strehl_after - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_aberration_closed_loop() {
        let g = paper();
        let a = inject_aberrations(&g, AberrationModel::RandomUniform { amplitude: PI }, 11);
        let rep = calibrate_and_verify(&g, &a).unwrap();
        assert!(rep.strehl_before < 0.5, "{}", rep.strehl_before);
        assert!(rep.strehl_after >= 0.99, "{}", rep.strehl_after);
        assert_eq!(rep.mask.per_beam_correction[[0, 0]], 0.0);
    }
}
