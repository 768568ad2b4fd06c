//! Drive tones and the phased beam array they produce.

use std::f64::consts::TAU;

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{LossModel, RipaGeometry, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::wrap_phase;

/// One optical tone, detuned from the zero-phase reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    #[serde(rename = "detuning_hz")]
    pub detuning: f64,
    pub amplitude: f64,
    #[serde(rename = "phase_rad", default)]
    pub phase: f64,
}

impl Tone {
    pub fn new(detuning: f64, amplitude: f64, phase: f64) -> Self {
        Self {
            detuning,
            amplitude,
            phase,
        }
    }

    /// Unit tone at the given detuning.
    pub fn at(detuning: f64) -> Self {
        Self::new(detuning, 1.0, 0.0)
    }
}

/// Serialised as a bare JSON array of tones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToneSet(pub Vec<Tone>);

impl ToneSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Tone> {
        self.0.iter()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let set: ToneSet = serde_json::from_str(text)?;
        for (k, t) in set.iter().enumerate() {
            if !(t.amplitude >= 0.0) || !t.detuning.is_finite() {
                return Err(Error::Argument(format!(
                    "tone {k}: amplitude must be >= 0 and detuning finite"
                )));
            }
        }
        Ok(set)
    }
}

impl FromIterator<Tone> for ToneSet {
    fn from_iter<I: IntoIterator<Item = Tone>>(iter: I) -> Self {
        ToneSet(iter.into_iter().collect())
    }
}

/// `a_ij = scale * rx^i ry^j exp(i (i phi_x + j phi_y))`: the structure every
/// synthesised array has until per-beam errors are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseRamp {
    pub scale: Complex64,
    pub decay: (f64, f64),
    pub phase: (f64, f64),
}

/// Complex amplitudes of the beam array, indexed `[i, j]` with `i` along x
/// (second stage) and `j` along y (first stage).
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayField {
    pub amplitudes: Array2<Complex64>,
    pub pitch: f64,
    pub mode_waist: f64,
    ramp: Option<PhaseRamp>,
}

impl ArrayField {
    /// Arbitrary amplitudes; focal evaluation falls back to direct sums.
    pub fn from_amplitudes(amplitudes: Array2<Complex64>, pitch: f64, mode_waist: f64) -> Self {
        Self {
            amplitudes,
            pitch,
            mode_waist,
            ramp: None,
        }
    }

    pub fn from_ramp(ramp: PhaseRamp, n_cols: usize, n_rows: usize, pitch: f64, mode_waist: f64) -> Self {
        let amplitudes = Array2::from_shape_fn((n_cols, n_rows), |(i, j)| {
            ramp.scale
                * ramp.decay.0.powi(i as i32)
                * ramp.decay.1.powi(j as i32)
                * Complex64::from_polar(1.0, i as f64 * ramp.phase.0 + j as f64 * ramp.phase.1)
        });
        Self {
            amplitudes,
            pitch,
            mode_waist,
            ramp: Some(ramp),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.amplitudes.dim()
    }

    pub fn ramp(&self) -> Option<&PhaseRamp> {
        self.ramp.as_ref()
    }

    /// Multiply beam (i, j) by exp(i phases[i, j]).
    pub fn with_phase_errors(&self, phases: &Array2<f64>) -> Result<Self> {
        if phases.dim() != self.dims() {
            return Err(Error::Argument(format!(
                "phase map {:?} does not match array {:?}",
                phases.dim(),
                self.dims()
            )));
        }
        let mut amplitudes = self.amplitudes.clone();
        for (a, &p) in amplitudes.iter_mut().zip(phases.iter()) {
            *a *= Complex64::from_polar(1.0, p);
        }
        Ok(Self::from_amplitudes(amplitudes, self.pitch, self.mode_waist))
    }

    /// Multiply every amplitude by a unit phasor.
    pub fn with_global_phase(&self, phase: f64) -> Self {
        let u = Complex64::from_polar(1.0, phase);
        let mut out = self.clone();
        out.amplitudes.mapv_inplace(|a| a * u);
        if let Some(r) = out.ramp.as_mut() {
            r.scale *= u;
        }
        out
    }

    /// Complex conjugate of every amplitude.
    pub fn conjugated(&self) -> Self {
        let mut out = self.clone();
        out.amplitudes.mapv_inplace(|a| a.conj());
        if let Some(r) = out.ramp.as_mut() {
            r.scale = r.scale.conj();
            r.phase = (-r.phase.0, -r.phase.1);
        }
        out
    }

    /// Total power sum |a_ij|^2.
    pub fn power(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

/// Inter-beam phase steps (phi_x, phi_y) for a detuning, each in [-pi, pi).
pub fn phase_pair(detuning: f64, geom: &RipaGeometry) -> (f64, f64) {
    (
        wrap_phase(TAU * (geom.roundtrip_2 / SPEED_OF_LIGHT * detuning).fract()),
        wrap_phase(TAU * (geom.roundtrip_1 / SPEED_OF_LIGHT * detuning).fract()),
    )
}

/// Focal-plane spot position (x, y) addressed by a detuning.
pub fn spot_position(detuning: f64, geom: &RipaGeometry) -> (f64, f64) {
    let (px, py) = phase_pair(detuning, geom);
    let l = geom.bz_extent();
    (l * px / TAU, l * py / TAU)
}

/// Beam array for one tone. Beam (0, 0) carries the full tone amplitude.
pub fn synthesize_array(tone: &Tone, geom: &RipaGeometry, loss: &LossModel) -> ArrayField {
    let (px, py) = phase_pair(tone.detuning, geom);
    let ramp = PhaseRamp {
        scale: Complex64::from_polar(tone.amplitude, tone.phase),
        decay: loss.amplitude_decay(),
        phase: (px, py),
    };
    ArrayField::from_ramp(ramp, geom.n_cols, geom.n_rows, geom.mla_pitch, geom.mode_waist())
}

/// Normalised |A_k|^2 weights of mutually incoherent tones.
pub fn static_intensity_weights(tones: &ToneSet) -> Result<Vec<f64>> {
    let mut sorted: Vec<f64> = tones.iter().map(|t| t.detuning).collect();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Argument(format!(
            "duplicate detuning {} Hz; merge coherent tones first",
            w[0]
        )));
    }
    let total: f64 = tones.iter().map(|t| t.amplitude * t.amplitude).sum();
    if total <= 0.0 {
        return Err(Error::Argument("tone set carries no power".into()));
    }
    Ok(tones.iter().map(|t| t.amplitude * t.amplitude / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn phase_pair_examples() {
        let g = RipaGeometry::default();
        assert_eq!(phase_pair(0.0, &g), (0.0, 0.0));
        let (px, py) = phase_pair(g.fsr_1(), &g);
        assert!(py.abs() < 1e-9);
        assert!((px - wrap_phase(TAU * g.length_ratio())).abs() < 1e-9);
        let (px, py) = phase_pair(g.fsr_2(), &g);
        assert!(px.abs() < 1e-9);
        assert!((py - TAU / g.length_ratio()).abs() < 1e-9);
        let (_, py) = phase_pair(g.fsr_1() / 2.0, &g);
        assert!((py.abs() - PI).abs() < 1e-9);
    }

    #[test]
    fn lossless_zero_detuning_is_uniform() {
        let a = synthesize_array(&Tone::at(0.0), &RipaGeometry::default(), &LossModel::lossless());
        assert_eq!(a.dims(), (8, 9));
        assert!(a
            .amplitudes
            .iter()
            .all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn first_stage_decay() {
        let a = synthesize_array(&Tone::at(0.0), &RipaGeometry::default(), &LossModel::default());
        let ratio = a.amplitudes[[0, 8]].norm_sqr() / a.amplitudes[[0, 0]].norm_sqr();
        assert!((ratio - 0.949f64.powi(8)).abs() < 1e-12);
        assert!((ratio - 0.658).abs() < 1e-3);
    }

    #[test]
    fn weights() {
        let one = ToneSet(vec![Tone::new(0.0, 2.0, 0.0)]);
        assert_eq!(static_intensity_weights(&one).unwrap(), vec![1.0]);
        let two = ToneSet(vec![Tone::at(0.0), Tone::at(1e6)]);
        assert_eq!(static_intensity_weights(&two).unwrap(), vec![0.5, 0.5]);
        let dup = ToneSet(vec![Tone::at(1e6), Tone::at(1e6)]);
        assert!(static_intensity_weights(&dup).is_err());
    }

    #[test]
    fn toneset_json_shape() {
        let s = ToneSet(vec![Tone::new(1.5e6, 1.0, 0.25)]);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"[{"detuning_hz":1500000.0,"amplitude":1.0,"phase_rad":0.25}]"#);
        assert_eq!(ToneSet::from_json_str(&text).unwrap(), s);
        assert!(ToneSet::from_json_str(r#"[{"detuning_hz":0,"amplitude":-1}]"#).is_err());
    }
}
