//! Physical parameter set and the closed-form quantities derived from it.
//!
//! Everything is SI: lengths in metres, frequencies in hertz. The defaults
//! describe the 8 x 9 cascaded device at 780 nm with a 1 mm microlens pitch.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum (exact).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Maximum relative mismatch |L_rt,1 - 2 f_MLA| / (2 f_MLA) accepted when the
/// geometry claims half-confocal operation.
pub const HALF_CONFOCAL_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RipaGeometry {
    pub wavelength: f64,
    /// Microlens pitch p.
    pub mla_pitch: f64,
    /// Microlens focal length.
    pub mla_focal: f64,
    /// Round-trip length of the first (fast-row, y) stage.
    pub roundtrip_1: f64,
    /// Round-trip length of the second (x) stage.
    pub roundtrip_2: f64,
    /// Beams along y (round trips in the first stage).
    pub n_rows: usize,
    /// Beams along x (round trips in the second stage).
    pub n_cols: usize,
    /// Focal length of the lens that interferes the array.
    pub focus_focal: f64,
    /// Overrides the lens-guide waist sqrt(f_MLA * lambda / pi).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_waist: Option<f64>,
    /// Assert L_rt,1 = 2 f_MLA within [`HALF_CONFOCAL_TOLERANCE`].
    #[serde(default = "default_true")]
    pub half_confocal: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RipaGeometry {
    fn default() -> Self {
        Self {
            wavelength: 780e-9,
            mla_pitch: 1e-3,
            mla_focal: 47e-3,
            roundtrip_1: 0.094,
            roundtrip_2: 2.31,
            n_rows: 9,
            n_cols: 8,
            focus_focal: 0.2,
            mode_waist: None,
            half_confocal: true,
        }
    }
}

impl RipaGeometry {
    /// Brillouin-zone extent L = f lambda / p.
    pub fn bz_extent(&self) -> f64 {
        self.focus_focal * self.wavelength / self.mla_pitch
    }

    /// Common beam waist w0 inside the lens guide.
    pub fn mode_waist(&self) -> f64 {
        self.mode_waist
            .unwrap_or_else(|| (self.mla_focal * self.wavelength / PI).sqrt())
    }

    /// Waist of the single-beam focal envelope, lambda f / (pi w0).
    pub fn envelope_waist(&self) -> f64 {
        self.wavelength * self.focus_focal / (PI * self.mode_waist())
    }

    /// Round-trip delay of the first stage.
    pub fn delay_1(&self) -> f64 {
        self.roundtrip_1 / SPEED_OF_LIGHT
    }

    /// Round-trip delay of the second stage.
    pub fn delay_2(&self) -> f64 {
        self.roundtrip_2 / SPEED_OF_LIGHT
    }

    pub fn fsr_1(&self) -> f64 {
        SPEED_OF_LIGHT / self.roundtrip_1
    }

    pub fn fsr_2(&self) -> f64 {
        SPEED_OF_LIGHT / self.roundtrip_2
    }

    pub fn length_ratio(&self) -> f64 {
        self.roundtrip_2 / self.roundtrip_1
    }

    /// Equivalent Gaussian waist of the interference spot along x and y.
    pub fn spot_waists(&self) -> (f64, f64) {
        let l = self.bz_extent();
        (
            equivalent_waist(self.n_cols, l).unwrap_or_else(|| self.envelope_waist()),
            equivalent_waist(self.n_rows, l).unwrap_or_else(|| self.envelope_waist()),
        )
    }

    /// A square n x n device with the same optics.
    pub fn with_counts(&self, n_cols: usize, n_rows: usize) -> Self {
        Self {
            n_cols,
            n_rows,
            ..self.clone()
        }
    }
}

/// L * sqrt(6 / (pi^2 (n^2 - 1))); `None` for n < 2.
pub(crate) fn equivalent_waist(n: usize, bz_extent: f64) -> Option<f64> {
    if n < 2 {
        return None;
    }
    let n2 = (n * n) as f64;
    Some(bz_extent * (6.0 / (PI * PI * (n2 - 1.0))).sqrt())
}

/// Per-round-trip power fractions and fixed stage efficiencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModel {
    pub kappa_1: f64,
    pub loss_1: f64,
    pub kappa_2: f64,
    pub loss_2: f64,
    pub kappa_lock: f64,
    pub relay_eff: f64,
    pub imaging_eff: f64,
}

impl Default for LossModel {
    fn default() -> Self {
        Self {
            kappa_1: 0.029,
            loss_1: 0.022,
            kappa_2: 0.068,
            loss_2: 0.033,
            kappa_lock: 0.097,
            relay_eff: 0.706,
            imaging_eff: 0.85,
        }
    }
}

impl LossModel {
    /// No power leaves the array except through ideal out-coupling.
    pub fn lossless() -> Self {
        Self {
            kappa_1: 0.0,
            loss_1: 0.0,
            kappa_2: 0.0,
            loss_2: 0.0,
            kappa_lock: 0.0,
            relay_eff: 1.0,
            imaging_eff: 1.0,
        }
    }

    /// Same fractional round-trip loss in both stages, no locking path.
    pub fn uniform(per_roundtrip: f64) -> Self {
        Self {
            kappa_1: 0.0,
            loss_1: per_roundtrip,
            kappa_2: 0.0,
            loss_2: per_roundtrip,
            kappa_lock: 0.0,
            relay_eff: 1.0,
            imaging_eff: 1.0,
        }
    }

    /// A_1 = kappa_1 + l_1.
    pub fn stage1_total(&self) -> f64 {
        self.kappa_1 + self.loss_1
    }

    /// A_2 = kappa_lock + kappa_2 + l_2.
    pub fn stage2_total(&self) -> f64 {
        self.kappa_lock + self.kappa_2 + self.loss_2
    }

    /// Field survival per round trip (x, y): sqrt(1 - A_2), sqrt(1 - A_1).
    pub fn amplitude_decay(&self) -> (f64, f64) {
        (
            (1.0 - self.stage2_total()).max(0.0).sqrt(),
            (1.0 - self.stage1_total()).max(0.0).sqrt(),
        )
    }
}

/// Knobs of the tone-synthesis chain that the optics do not fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSettings {
    /// Phase-modulation index beta per unit RF amplitude.
    pub modulation_index: f64,
    /// RF carrier offset of the +1 sideband band centre.
    pub rf_center_hz: f64,
    /// Optical filter 3 dB bandwidth.
    pub filter_bandwidth_hz: f64,
    /// Detuning at which both inter-beam phases vanish.
    pub reference_detuning_hz: f64,
    /// Photodetector -3 dB bandwidth.
    pub detector_bandwidth_hz: f64,
}

impl Default for DriveSettings {
    fn default() -> Self {
        Self {
            modulation_index: 0.3,
            rf_center_hz: 11e9,
            filter_bandwidth_hz: 4e9,
            reference_detuning_hz: 0.0,
            detector_bandwidth_hz: 50e6,
        }
    }
}

/// Complete input document: `{"geometry": {..}, "loss": {..}, "drive": {..}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub geometry: RipaGeometry,
    #[serde(default)]
    pub loss: LossModel,
    #[serde(default)]
    pub drive: DriveSettings,
}

impl SystemConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Errors with every violated invariant when the config is unusable.
    pub fn validated(self) -> Result<Self> {
        let diags = validate_config(&self.geometry, &self.loss);
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(diags))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    NotPositive,
    CountTooSmall,
    SeparationOfScales,
    HalfConfocal,
    FractionOutOfRange,
    StageLossTooLarge,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::NotPositive => "must be strictly positive",
            Rule::CountTooSmall => "count must be at least 1",
            Rule::SeparationOfScales => "separation of scales violated",
            Rule::HalfConfocal => "half-confocal condition violated",
            Rule::FractionOutOfRange => "fraction out of range",
            Rule::StageLossTooLarge => "stage round-trip loss must stay below 1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.detail)
    }
}

fn diag(field: &str, rule: Rule, detail: String) -> Diagnostic {
    Diagnostic {
        field: field.to_string(),
        rule,
        detail,
    }
}

fn geometry_diagnostics(geom: &RipaGeometry, out: &mut Vec<Diagnostic>) {
    let lengths = [
        ("wavelength", geom.wavelength),
        ("mla_pitch", geom.mla_pitch),
        ("mla_focal", geom.mla_focal),
        ("roundtrip_1", geom.roundtrip_1),
        ("roundtrip_2", geom.roundtrip_2),
        ("focus_focal", geom.focus_focal),
    ];
    for (name, value) in lengths {
        if !(value > 0.0 && value.is_finite()) {
            out.push(diag(name, Rule::NotPositive, format!("got {value}")));
        }
    }
    if let Some(w) = geom.mode_waist {
        if !(w > 0.0 && w.is_finite()) {
            out.push(diag("mode_waist", Rule::NotPositive, format!("got {w}")));
        }
    }
    for (name, n) in [("n_rows", geom.n_rows), ("n_cols", geom.n_cols)] {
        if n < 1 {
            out.push(diag(name, Rule::CountTooSmall, format!("got {n}")));
        }
    }
    if geom.roundtrip_2 <= geom.roundtrip_1 {
        out.push(diag(
            "roundtrip_2",
            Rule::SeparationOfScales,
            format!(
                "roundtrip_2 = {} m must exceed roundtrip_1 = {} m",
                geom.roundtrip_2, geom.roundtrip_1
            ),
        ));
    }
    if geom.half_confocal && geom.mla_focal > 0.0 {
        let mismatch = (geom.roundtrip_1 - 2.0 * geom.mla_focal).abs() / (2.0 * geom.mla_focal);
        if mismatch >= HALF_CONFOCAL_TOLERANCE {
            out.push(diag(
                "roundtrip_1",
                Rule::HalfConfocal,
                format!("|L_rt,1 - 2 f_MLA| / 2 f_MLA = {mismatch:.4}"),
            ));
        }
    }
}

fn loss_diagnostics(loss: &LossModel, out: &mut Vec<Diagnostic>) {
    let fractions = [
        ("kappa_1", loss.kappa_1),
        ("loss_1", loss.loss_1),
        ("kappa_2", loss.kappa_2),
        ("loss_2", loss.loss_2),
        ("kappa_lock", loss.kappa_lock),
    ];
    for (name, value) in fractions {
        if !(0.0..1.0).contains(&value) {
            out.push(diag(name, Rule::FractionOutOfRange, format!("{value} not in [0, 1)")));
        }
    }
    // Pass-through efficiencies may be exactly 1 (ideal relay).
    for (name, value) in [("relay_eff", loss.relay_eff), ("imaging_eff", loss.imaging_eff)] {
        if !(value > 0.0 && value <= 1.0) {
            out.push(diag(name, Rule::FractionOutOfRange, format!("{value} not in (0, 1]")));
        }
    }
    if loss.stage1_total() >= 1.0 {
        out.push(diag(
            "kappa_1+loss_1",
            Rule::StageLossTooLarge,
            format!("A_1 = {}", loss.stage1_total()),
        ));
    }
    if loss.stage2_total() >= 1.0 {
        out.push(diag(
            "kappa_lock+kappa_2+loss_2",
            Rule::StageLossTooLarge,
            format!("A_2 = {}", loss.stage2_total()),
        ));
    }
}

/// Every violated invariant of the geometry and loss model; empty when valid.
pub fn validate_config(geom: &RipaGeometry, loss: &LossModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    geometry_diagnostics(geom, &mut out);
    loss_diagnostics(loss, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedQuantities {
    pub fsr_1: f64,
    pub fsr_2: f64,
    pub f_res: f64,
    pub bz_extent: f64,
    pub mode_waist: f64,
    /// Spot waist along y (first-stage axis).
    pub spot_waist: f64,
    /// Spot waist along x (second-stage axis).
    pub spot_waist_x: f64,
    pub envelope_waist: f64,
    pub zone_count: f64,
    pub length_ratio: f64,
}

pub fn derive_quantities(geom: &RipaGeometry) -> Result<DerivedQuantities> {
    let mut diags = Vec::new();
    geometry_diagnostics(geom, &mut diags);
    if !diags.is_empty() {
        return Err(Error::InvalidConfig(diags));
    }
    let fsr_2 = geom.fsr_2();
    let bz_extent = geom.bz_extent();
    let mode_waist = geom.mode_waist();
    let envelope_waist = geom.envelope_waist();
    let (spot_waist_x, spot_waist) = geom.spot_waists();
    Ok(DerivedQuantities {
        fsr_1: geom.fsr_1(),
        fsr_2,
        f_res: fsr_2 / geom.n_cols as f64,
        bz_extent,
        mode_waist,
        spot_waist,
        spot_waist_x,
        envelope_waist,
        zone_count: geom.mla_pitch / (PI * mode_waist),
        length_ratio: geom.length_ratio(),
    })
}
