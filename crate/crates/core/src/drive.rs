//! Tone compilation and the RF / electro-optic synthesis chain.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{spot_position, Tone, ToneSet};
use crate::config::RipaGeometry;
use crate::error::{Error, Result};
use crate::special::bessel_j;
use crate::wrap_phase;

/// Validity bound of the first-order multi-tone sideband expansion.
pub const SIDEBAND_VALIDITY_LIMIT: f64 = 0.5;

/// One RF drive tone at an absolute frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RfTone {
    pub freq_hz: f64,
    pub amplitude: f64,
    pub phase_rad: f64,
}

/// Map optical detunings onto RF frequencies around `rf_center`.
pub fn rf_tones(tones: &ToneSet, rf_center: f64) -> Vec<RfTone> {
    tones
        .iter()
        .map(|t| RfTone {
            freq_hz: rf_center + t.detuning,
            amplitude: t.amplitude,
            phase_rad: t.phase,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfWaveform {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
    pub tones: Vec<RfTone>,
}

/// V(t) = (1 / sum A_k) sum A_k cos(2 pi nu_k t + phi_k), sampled exactly.
pub fn rf_waveform(tones: &[RfTone], rate: f64, duration: f64) -> Result<RfWaveform> {
    let fmax = tones.iter().map(|t| t.freq_hz.abs()).fold(0.0, f64::max);
    if !(rate > 2.0 * fmax) {
        return Err(Error::Sampling(format!(
            "rate {rate:.4e} Sa/s does not exceed twice the highest tone {fmax:.4e} Hz"
        )));
    }
    if !(duration >= 0.0) {
        return Err(Error::Argument("duration must be non-negative".into()));
    }
    let total: f64 = tones.iter().map(|t| t.amplitude).sum();
    let n = (duration * rate).round() as usize;
    let samples = (0..n)
        .map(|k| {
            if total <= 0.0 {
                return 0.0;
            }
            let t = k as f64 / rate;
            tones
                .iter()
                .map(|tone| tone.amplitude * (TAU * tone.freq_hz * t + tone.phase_rad).cos())
                .sum::<f64>()
                / total
        })
        .collect();
    Ok(RfWaveform {
        sample_rate: rate,
        samples,
        tones: tones.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandLine {
    pub offset_hz: f64,
    pub amplitude: Complex64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SidebandSpectrum {
    pub lines: Vec<SidebandLine>,
}

impl SidebandSpectrum {
    pub fn total_power(&self) -> f64 {
        self.lines.iter().map(|l| l.amplitude.norm_sqr()).sum()
    }

    pub fn line_at(&self, offset_hz: f64) -> Option<&SidebandLine> {
        self.lines
            .iter()
            .find(|l| (l.offset_hz - offset_hz).abs() <= 1e-6 * offset_hz.abs().max(1.0))
    }

    fn sorted(mut lines: Vec<SidebandLine>) -> Self {
        lines.sort_by(|a, b| a.offset_hz.total_cmp(&b.offset_hz));
        Self { lines }
    }
}

/// Optical sidebands of phase modulation with index `beta` per unit RF amplitude.
///
/// A single tone gives the exact Bessel comb i^n J_n(beta A) e^{i n phi}
/// (orders up to where the lines drop below 1e-16). Several tones use the
/// first-order expansion: carrier prod J_0(beta A_k) and one +/-1 line per
/// tone, valid while beta sum A_k < 0.5.
pub fn eom_spectrum(tones: &[RfTone], beta: f64) -> Result<SidebandSpectrum> {
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!("modulation index must be >= 0, got {beta}")));
    }
    let one = Complex64::new(1.0, 0.0);
    let i = Complex64::i();
    match tones {
        [] => Ok(SidebandSpectrum {
            lines: vec![SidebandLine {
                offset_hz: 0.0,
                amplitude: one,
            }],
        }),
        [t] => {
            let x = beta * t.amplitude;
            let mut lines = vec![SidebandLine {
                offset_hz: 0.0,
                amplitude: Complex64::new(bessel_j(0, x), 0.0),
            }];
            if x > 0.0 {
                let nmax = (x + 10.0 * x.cbrt() + 20.0) as i32;
                for n in 1..=nmax {
                    for s in [n, -n] {
                        let a = i.powi(s) * bessel_j(s, x) * Complex64::from_polar(1.0, s as f64 * t.phase_rad);
                        if a.norm() > 1e-16 {
                            lines.push(SidebandLine {
                                offset_hz: s as f64 * t.freq_hz,
                                amplitude: a,
                            });
                        }
                    }
                }
            }
            Ok(SidebandSpectrum::sorted(lines))
        }
        _ => {
            let sum_a: f64 = tones.iter().map(|t| t.amplitude).sum();
            if beta * sum_a >= SIDEBAND_VALIDITY_LIMIT {
                return Err(Error::Validity(beta * sum_a));
            }
            let j0: Vec<f64> = tones.iter().map(|t| bessel_j(0, beta * t.amplitude)).collect();
            let carrier: f64 = j0.iter().product();
            let mut lines = vec![SidebandLine {
                offset_hz: 0.0,
                amplitude: Complex64::new(carrier, 0.0),
            }];
            for (k, t) in tones.iter().enumerate() {
                let others: f64 = j0.iter().enumerate().filter(|(m, _)| *m != k).map(|(_, v)| v).product();
                let a = i * bessel_j(1, beta * t.amplitude) * others;
                for s in [1.0, -1.0] {
                    lines.push(SidebandLine {
                        offset_hz: s * t.freq_hz,
                        amplitude: a * Complex64::from_polar(1.0, s * t.phase_rad),
                    });
                }
            }
            Ok(SidebandSpectrum::sorted(lines))
        }
    }
}

/// |H| of the second-order flat-top filter.
pub fn filter_transfer(offset: f64, center: f64, bandwidth: f64) -> f64 {
    let u = (offset - center) / (bandwidth / 2.0);
    1.0 / (1.0 + u.powi(4)).sqrt()
}

/// Scale each line by the filter amplitude response.
pub fn filter_apply(spec: &SidebandSpectrum, center: f64, bandwidth: f64) -> Result<SidebandSpectrum> {
    if !(bandwidth > 0.0) {
        return Err(Error::Argument("filter bandwidth must be positive".into()));
    }
    Ok(SidebandSpectrum {
        lines: spec
            .lines
            .iter()
            .map(|l| SidebandLine {
                offset_hz: l.offset_hz,
                amplitude: l.amplitude * filter_transfer(l.offset_hz, center, bandwidth),
            })
            .collect(),
    })
}

/// Lattice used by [`tones_for_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridVariant {
    /// nu = (2 i + j / N) FSR_2
    #[default]
    QuasiSquare,
    /// nu = (i + j / N) FSR_2 / (1 + 1/R^2)
    Orthogonal,
}

/// Tones addressing an `n x n` grid, ordered `k = i * n + j`.
///
/// Indices are centred, (i - (n-1)/2, j - (n-1)/2), so the grid sits around
/// the zone centre and the single-tone case lands at zero detuning.
pub fn tones_for_grid(n: usize, geom: &RipaGeometry, variant: GridVariant) -> Result<ToneSet> {
    if n == 0 {
        return Err(Error::Argument("grid size must be at least 1".into()));
    }
    let fsr2 = geom.fsr_2();
    let r = geom.length_ratio();
    let c = (n as f64 - 1.0) / 2.0;
    let nf = n as f64;
    let mut tones = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (ii, jj) = (i as f64 - c, j as f64 - c);
            let nu = match variant {
                GridVariant::QuasiSquare => (2.0 * ii + jj / nf) * fsr2,
                GridVariant::Orthogonal => (ii + jj / nf) * fsr2 / (1.0 + 1.0 / (r * r)),
            };
            tones.push(Tone::at(nu));
        }
    }
    let lo = tones.iter().map(|t| t.detuning).fold(f64::INFINITY, f64::min);
    let hi = tones.iter().map(|t| t.detuning).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo >= geom.fsr_1() {
        return Err(Error::Range(format!(
            "grid spans {:.4e} Hz, beyond one FSR_1 = {:.4e} Hz",
            hi - lo,
            geom.fsr_1()
        )));
    }
    Ok(ToneSet(tones))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotAssignment {
    pub tones: ToneSet,
    /// Distance between each target and the position its tone addresses.
    pub placement_errors: Vec<f64>,
    /// Index on the f_res channel lattice.
    pub channels: Vec<i64>,
}

/// Inverse frequency-to-position map.
///
/// Within one FSR_1 the addressed positions lie on parallel raster lines
/// (x advances by L per FSR_2 while y advances by L/R). Each target is
/// projected onto the nearest line; in channelized mode the detuning is then
/// snapped to the f_res lattice.
pub fn tones_for_spots(targets: &[(f64, f64)], geom: &RipaGeometry, channelized: bool) -> Result<SpotAssignment> {
    let l = geom.bz_extent();
    let r = geom.length_ratio();
    let fsr2 = geom.fsr_2();
    let fsr1 = geom.fsr_1();
    let f_res = fsr2 / geom.n_cols as f64;
    let lines = r.ceil() as i64;

    let mut tones = Vec::with_capacity(targets.len());
    let mut errors = Vec::with_capacity(targets.len());
    let mut channels = Vec::with_capacity(targets.len());
    let mut owner: BTreeMap<i64, usize> = BTreeMap::new();

    for (k, &(x, y)) in targets.iter().enumerate() {
        if x.abs() > l / 2.0 || y.abs() > l / 2.0 {
            return Err(Error::Range(format!(
                "target {k} ({x:.3e}, {y:.3e}) outside the first zone"
            )));
        }
        let (u, v) = (x / l, y / l);
        let mut best: Option<(f64, f64)> = None;
        for m in -lines..=lines {
            // Line m: nu = (m + s) FSR_2 with s in [-1/2, 1/2); position (s L, (m + s) L / R).
            let dv = wrap_phase(TAU * (v - m as f64 / r)) / TAU;
            let s = ((u + dv / r) / (1.0 + 1.0 / (r * r))).clamp(-0.5, 0.5);
            let nu = (m as f64 + s) * fsr2;
            if nu < -fsr1 / 2.0 || nu >= fsr1 / 2.0 {
                continue;
            }
            let d = placement_error((x, y), nu, geom);
            if best.is_none_or(|b| d < b.1) {
                best = Some((nu, d));
            }
        }
        let (mut nu, mut err) = best.ok_or_else(|| Error::Range(format!("target {k} has no raster line")))?;
        let channel = (nu / f_res).round() as i64;
        if channelized {
            nu = channel as f64 * f_res;
            err = placement_error((x, y), nu, geom);
        }
        if let Some(&first) = owner.get(&channel) {
            return Err(Error::Collision {
                first,
                second: k,
                channel,
            });
        }
        owner.insert(channel, k);
        tones.push(Tone::at(nu));
        errors.push(err);
        channels.push(channel);
    }
    Ok(SpotAssignment {
        tones: ToneSet(tones),
        placement_errors: errors,
        channels,
    })
}

/// Distance from a target to the spot a detuning addresses, measured on the
/// periodic zone (nearest image).
pub fn placement_error(target: (f64, f64), detuning: f64, geom: &RipaGeometry) -> f64 {
    let (dx, dy) = placement_offset(target, detuning, geom);
    dx.hypot(dy)
}

/// Signed (dx, dy) from target to addressed spot, nearest periodic image.
pub fn placement_offset(target: (f64, f64), detuning: f64, geom: &RipaGeometry) -> (f64, f64) {
    let l = geom.bz_extent();
    let (px, py) = spot_position(detuning, geom);
    (
        wrap_phase(TAU * (px - target.0) / l) * l / TAU,
        wrap_phase(TAU * (py - target.1) / l) * l / TAU,
    )
}

/// Intensity-envelope value below which compensation is refused.
pub const ENVELOPE_FLOOR: f64 = 1e-3;

/// Divide each tone amplitude by the square root of the focal intensity
/// envelope at its spot, so ideal peak intensities equalise.
pub fn compensate_envelope(tones: &ToneSet, geom: &RipaGeometry) -> Result<ToneSet> {
    let we = geom.envelope_waist();
    tones
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (x, y) = spot_position(t.detuning, geom);
            let env = (-2.0 * (x * x + y * y) / (we * we)).exp();
            if env < ENVELOPE_FLOOR {
                return Err(Error::Range(format!("tone {k}: envelope {env:.2e} below floor")));
            }
            Ok(Tone {
                amplitude: t.amplitude / env.sqrt(),
                ..*t
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(ToneSet)
}

/// Optional RF amplitude calibration: for each frequency, the drive code
/// producing a relative optical power. Identity when empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RfCalibration {
    /// (freq, sorted [(power_rel, amp_code)])
    rows: Vec<(f64, Vec<(f64, f64)>)>,
}

#[derive(Debug, Deserialize)]
struct CalibrationRecord {
    freq_hz: f64,
    amp_code: f64,
    power_rel: f64,
}

impl RfCalibration {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["freq_hz", "amp_code", "power_rel"] {
            return Err(Error::Argument(format!(
                "calibration header must be freq_hz,amp_code,power_rel, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut groups: BTreeMap<u64, (f64, Vec<(f64, f64)>)> = BTreeMap::new();
        for rec in rdr.deserialize() {
            let rec: CalibrationRecord = rec?;
            let key = rec.freq_hz.to_bits();
            groups
                .entry(key)
                .or_insert_with(|| (rec.freq_hz, Vec::new()))
                .1
                .push((rec.power_rel, rec.amp_code));
        }
        let mut rows: Vec<(f64, Vec<(f64, f64)>)> = groups.into_values().collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, pts) in rows.iter_mut() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Drive code for a requested relative power at a frequency.
    pub fn amp_code(&self, freq_hz: f64, power_rel: f64) -> f64 {
        if self.rows.is_empty() {
            return power_rel.max(0.0).sqrt();
        }
        let lookup = |pts: &[(f64, f64)]| interp(pts, power_rel, "power_rel");
        let freqs: Vec<(f64, f64)> = self.rows.iter().map(|(f, pts)| (*f, lookup(pts))).collect();
        interp(&freqs, freq_hz, "freq_hz")
    }

    /// Replace each tone amplitude A by the code producing power A^2.
    pub fn apply(&self, tones: &ToneSet, rf_center: f64) -> ToneSet {
        tones
            .iter()
            .map(|t| Tone {
                amplitude: self.amp_code(rf_center + t.detuning, t.amplitude * t.amplitude),
                ..*t
            })
            .collect()
    }
}

/// Piecewise-linear interpolation with clamping outside the table.
fn interp(pts: &[(f64, f64)], x: f64, what: &str) -> f64 {
    match pts {
        [] => x,
        [only] => only.1,
        _ => {
            let first = pts[0];
            let last = pts[pts.len() - 1];
            if x <= first.0 {
                if x < first.0 {
                    log::warn!("{what} = {x} below calibration range, clamped");
                }
                return first.1;
            }
            if x >= last.0 {
                if x > last.0 {
                    log::warn!("{what} = {x} above calibration range, clamped");
                }
                return last.1;
            }
            let k = pts.partition_point(|p| p.0 <= x);
            let (a, b) = (pts[k - 1], pts[k]);
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        }
    }
}

/// Closed-form addressed spacing and axis angle of the quasi-square grid.
pub fn quasi_square_geometry(n: usize, geom: &RipaGeometry) -> (f64, f64, f64) {
    let l = geom.bz_extent();
    let r = geom.length_ratio();
    let nf = n as f64;
    let d_x = (l / nf) * (1.0 + 1.0 / (r * r)).sqrt();
    let d_y = 2.0 * l / r;
    (d_x, d_y, PI / 2.0 - (1.0 / r).atan())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(freq: f64, amp: f64) -> RfTone {
        RfTone {
            freq_hz: freq,
            amplitude: amp,
            phase_rad: 0.0,
        }
    }

    #[test]
    fn waveform_normalisation() {
        let w = rf_waveform(&[one(1e6, 1.0)], 1e8, 1e-6).unwrap();
        assert_eq!(w.samples.len(), 100);
        assert!((w.samples[0] - 1.0).abs() < 1e-15);
        assert!((w.samples[25] - (TAU * 0.25).cos()).abs() < 1e-12);
        let w = rf_waveform(&[one(1e6, 1.0), one(3e6, 1.0)], 1e8, 1e-6).unwrap();
        assert!(w.samples.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let many: Vec<RfTone> = (0..100).map(|k| one(1e6 + k as f64 * 1e5, 1.0)).collect();
        let w = rf_waveform(&many, 1e9, 1e-7).unwrap();
        // Each tone contributes 1/100 of the single-tone amplitude at t = 0.
        assert!((w.samples[0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            rf_waveform(&[one(1e9, 1.0)], 1.5e9, 1e-6),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn bessel_comb() {
        let s = eom_spectrum(&[one(1e9, 1.0)], 0.0).unwrap();
        assert_eq!(s.lines.len(), 1);
        let beta = 0.3;
        let s = eom_spectrum(&[one(1e9, 1.0)], beta).unwrap();
        let c = s.line_at(0.0).unwrap().amplitude.norm();
        let p = s.line_at(1e9).unwrap().amplitude.norm();
        let m = s.line_at(-1e9).unwrap().amplitude.norm();
        assert!((p / c - bessel_j(1, beta) / bessel_j(0, beta)).abs() < 1e-14);
        assert!((p - m).abs() < 1e-15);
        assert!((s.total_power() - 1.0).abs() < 1e-12);
        let tiny = eom_spectrum(&[one(1e9, 1.0)], 1e-4).unwrap();
        let ratio = tiny.line_at(1e9).unwrap().amplitude.norm() / tiny.line_at(0.0).unwrap().amplitude.norm();
        assert!((ratio / 5e-5 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn multi_tone_first_order() {
        let tones = [one(10e9, 0.5), one(11e9, 0.5)];
        let s = eom_spectrum(&tones, 0.3).unwrap();
        assert_eq!(s.lines.len(), 5);
        assert!(s.lines.windows(2).all(|w| w[0].offset_hz < w[1].offset_hz));
        let p = s.line_at(10e9).unwrap().amplitude.norm();
        assert!((p - 0.3 * 0.5 / 2.0).abs() < 1e-3);
        assert!(s.total_power() <= 1.0);
        assert!(matches!(eom_spectrum(&tones, 0.5), Err(Error::Validity(_))));
    }

    #[test]
    fn filter_response() {
        assert_eq!(filter_transfer(11e9, 11e9, 4e9), 1.0);
        assert!((filter_transfer(13e9, 11e9, 4e9).powi(2) - 0.5).abs() < 1e-15);
        let carrier = filter_transfer(0.0, 11e9, 4e9).powi(2);
        assert!((1.0 / carrier - (5.5f64.powi(4) + 1.0)).abs() < 1e-6);
        assert!(carrier < 1.1e-3);
    }

    #[test]
    fn grid_of_one() {
        let t = tones_for_grid(1, &RipaGeometry::default(), GridVariant::QuasiSquare).unwrap();
        assert_eq!(t.0, vec![Tone::at(0.0)]);
    }

    #[test]
    fn grid_overflow() {
        let r = tones_for_grid(40, &RipaGeometry::default(), GridVariant::QuasiSquare);
        assert!(matches!(r, Err(Error::Range(_))));
    }

    #[test]
    fn spot_inverse_examples() {
        let g = RipaGeometry::default();
        let a = tones_for_spots(&[(0.0, 0.0)], &g, false).unwrap();
        assert!(a.tones.0[0].detuning.abs() < 1e-6);
        let l = g.bz_extent();
        let targets = [(0.3 * l, 10e-6), (-0.3 * l, 10e-6)];
        let a = tones_for_spots(&targets, &g, true).unwrap();
        assert_ne!(a.channels[0], a.channels[1]);
        for (t, &target) in a.tones.iter().zip(&targets) {
            let (dx, dy) = placement_offset(target, t.detuning, &g);
            assert!(dx.abs() <= l / (2.0 * g.n_cols as f64) + 1e-9);
            assert!(dy.abs() <= l / (2.0 * g.length_ratio()) + l / (2.0 * 8.0 * g.length_ratio()) + 1e-9);
        }
    }

    #[test]
    fn collision_is_reported() {
        let g = RipaGeometry::default();
        match tones_for_spots(&[(1e-6, 0.0), (2e-6, 0.0)], &g, true) {
            Err(Error::Collision { first, second, .. }) => assert_eq!((first, second), (0, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn envelope_compensation() {
        let g = RipaGeometry::default();
        let centre = compensate_envelope(&ToneSet(vec![Tone::at(0.0)]), &g).unwrap();
        assert_eq!(centre.0[0].amplitude, 1.0);
        let we = g.envelope_waist();
        let nu = 0.4 * g.fsr_2();
        let (px, py) = spot_position(nu, &g);
        let env = (-2.0 * (px * px + py * py) / (we * we)).exp();
        let out = compensate_envelope(&ToneSet(vec![Tone::at(0.0), Tone::at(nu)]), &g).unwrap();
        assert!((out.0[1].amplitude / out.0[0].amplitude - 1.0 / env.sqrt()).abs() < 1e-12);
        let far = RipaGeometry {
            mode_waist: Some(2e-3),
            ..g.clone()
        };
        assert!(compensate_envelope(&ToneSet(vec![Tone::at(0.45 * far.fsr_2())]), &far).is_err());
    }

    #[test]
    fn calibration_table() {
        let csv = "freq_hz,amp_code,power_rel\n1e9,0,0\n1e9,100,1\n2e9,0,0\n2e9,200,1\n";
        let cal = RfCalibration::from_reader(csv.as_bytes()).unwrap();
        assert!((cal.amp_code(1e9, 0.5) - 50.0).abs() < 1e-12);
        assert!((cal.amp_code(1.5e9, 0.5) - 75.0).abs() < 1e-12);
        assert!((cal.amp_code(5e9, 2.0) - 200.0).abs() < 1e-12);
        assert_eq!(RfCalibration::identity().amp_code(1e9, 0.25), 0.5);
        assert!(RfCalibration::from_reader("a,b,c\n1,2,3\n".as_bytes()).is_err());
    }
}
