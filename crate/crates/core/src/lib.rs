//! Simulation and analysis toolkit for cascaded re-imaging phased array (RIPA)
//! spatial light modulators.
//!
//! A RIPA converts laser frequency into a two-dimensional phase ramp across an
//! `N_x x N_y` array of re-imaged Gaussian beams. Focusing the array with a
//! lens places an interference spot at a position set by that frequency. This
//! crate covers the forward chain (drive tones to focal-plane intensity), the
//! time domain, and the figures of merit used to characterise a device.
//!
//! ```
//! use ripa_core::config::{derive_quantities, RipaGeometry};
//!
//! let d = derive_quantities(&RipaGeometry::default()).unwrap();
//! assert!((d.bz_extent - 156e-6).abs() < 1e-9);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod array;
pub mod beam_optics;
pub mod calibration;
pub mod config;
pub mod drive;
pub mod error;
pub mod export;
pub mod fit;
pub mod focal;
pub mod special;
pub mod time;

mod fft;

pub use array::{phase_pair, synthesize_array, ArrayField, Tone, ToneSet};
pub use config::{
    derive_quantities, validate_config, DerivedQuantities, DriveSettings, LossModel, RipaGeometry, SystemConfig,
};
pub use error::{Error, Result};
pub use focal::{FieldGrid, IntensityGrid, SpotFit};

/// Wrap an angle into [-pi, pi).
pub fn wrap_phase(phi: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (phi + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= PI {
        w - TAU
    } else {
        w
    }
}
