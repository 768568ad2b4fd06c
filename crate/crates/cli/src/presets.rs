//! Built-in drive programs for the `move` command.

use ripa_core::drive::tones_for_spots;
use ripa_core::time::{Channel, DriveProgram, Segment, SegmentKind};
use ripa_core::{Result, RipaGeometry};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two spots swept across the zone in 200 ns.
    #[default]
    TwoRamps,
    /// One spot split into two, moved apart and recombined.
    SplitMerge,
    /// A single tone hopping between four sites every 200 ns.
    Switching,
}

fn hold(start: f64, duration: f64, detuning_hz: f64) -> Segment {
    Segment {
        start,
        duration,
        kind: SegmentKind::Hold {
            detuning_hz,
            amplitude: 1.0,
        },
    }
}

fn ramp(start: f64, duration: f64, from: f64, to: f64) -> Segment {
    Segment {
        start,
        duration,
        kind: SegmentKind::LinearFrequencyRamp {
            start_hz: from,
            end_hz: to,
            amplitude: 1.0,
        },
    }
}

fn channel(segments: Vec<Segment>) -> Channel {
    Channel {
        phase_rad: 0.0,
        segments,
    }
}

pub fn program(preset: Preset, geom: &RipaGeometry) -> Result<DriveProgram> {
    let fsr = geom.fsr_2();
    let channels = match preset {
        Preset::TwoRamps => vec![
            channel(vec![
                hold(0.0, 100e-9, -0.40 * fsr),
                ramp(100e-9, 200e-9, -0.40 * fsr, -0.05 * fsr),
                hold(300e-9, 100e-9, -0.05 * fsr),
            ]),
            channel(vec![
                hold(0.0, 100e-9, 0.05 * fsr),
                ramp(100e-9, 200e-9, 0.05 * fsr, 0.40 * fsr),
                hold(300e-9, 100e-9, 0.40 * fsr),
            ]),
        ],
        Preset::SplitMerge => {
            let d = 0.25 * fsr;
            [-d, d]
                .iter()
                .map(|&e| {
                    channel(vec![
                        hold(0.0, 150e-9, 0.0),
                        ramp(150e-9, 200e-9, 0.0, e),
                        hold(350e-9, 150e-9, e),
                        ramp(500e-9, 200e-9, e, 0.0),
                        hold(700e-9, 300e-9, 0.0),
                    ])
                })
                .collect()
        }
        Preset::Switching => {
            let l = geom.bz_extent();
            let (sx, sy) = (0.25 * l, 2.0 * l / 9.0);
            let sites = [(-sx, -sy), (sx, -sy), (sx, sy), (-sx, sy)];
            let tones = tones_for_spots(&sites, geom, false)?;
            let slot = 200e-9;
            vec![channel(
                tones
                    .tones
                    .iter()
                    .enumerate()
                    .map(|(k, t)| hold(k as f64 * slot, slot, t.detuning))
                    .collect(),
            )]
        }
    };
    Ok(DriveProgram { channels })
}

/// End time of the last segment of any channel.
pub fn program_end(prog: &DriveProgram) -> f64 {
    prog.channels
        .iter()
        .flat_map(|c| c.segments.iter().map(Segment::end))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let g = RipaGeometry::default();
        for p in [Preset::TwoRamps, Preset::SplitMerge, Preset::Switching] {
            let prog = program(p, &g).unwrap();
            prog.validate(&g).unwrap();
            assert!(program_end(&prog) > 0.0);
        }
    }
}
