//! Subcommand arguments and their artifact writers.

use std::f64::consts::PI;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ripa_core::analysis::{
    crosstalk_curve, efficiency_budget, fit_tone_spots, grid_metrics, kappa_grid, powerlaw_fit, separation_grid,
    tradeoff_curve, tradeoff_point, uniformity_stats, CrosstalkOptions, CrosstalkWeight,
};
use ripa_core::array::{spot_position, synthesize_array, Tone};
use ripa_core::beam_optics::stability_report;
use ripa_core::calibration::{calibrate_and_verify_with, inject_aberrations, AberrationModel, CalibrationOptions};
use ripa_core::drive::{compensate_envelope, quasi_square_geometry, tones_for_grid, GridVariant};
use ripa_core::export::{write_mask, write_movie, write_pgm_to, write_trace_csv, ImageSidecar};
use ripa_core::focal::{
    fit_spot_with, focal_field_numeric, peak_in_zone, propagate_axial, static_image, AnalyticFocal, FocalWindow,
    NumericGridSpec, SpotFitOptions,
};
use ripa_core::time::{
    extract_trajectories, pd_filter, region_trace, rise_fall, simulate_movie, square_aperture, DriveProgram,
    MovieOptions, TimeTrace, TrackOptions,
};
use ripa_core::{derive_quantities, IntensityGrid, LossModel, SystemConfig, ToneSet};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{json_hash, Artifacts};
use crate::presets::{program, program_end, Preset};
use crate::{CliError, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FocalArgs {
    /// Tone detuning in Hz.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub detuning: f64,
    #[arg(long, value_enum, default_value_t = Solver::Analytic)]
    pub solver: Solver,
    /// Pixel pitch in m; an eighth of the spot waist when omitted.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Pixels per side of the analytic window.
    #[arg(long, default_value_t = 129)]
    pub pixels: usize,
    /// Axial offset from the focal plane in m (numeric solver only).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Detunings spread evenly over one FSR_1.
    #[arg(long, default_value_t = 257)]
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Lattice {
    #[default]
    QuasiSquare,
    Orthogonal,
}

impl From<Lattice> for GridVariant {
    fn from(l: Lattice) -> Self {
        match l {
            Lattice::QuasiSquare => GridVariant::QuasiSquare,
            Lattice::Orthogonal => GridVariant::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GridArgs {
    /// Tones per side.
    #[arg(long, default_value_t = 11)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = Lattice::QuasiSquare)]
    pub variant: Lattice,
    /// Pre-compensate the envelope roll-off in the tone amplitudes.
    #[arg(long)]
    pub compensate: bool,
    /// Pixels per side of the one-zone image.
    #[arg(long, default_value_t = 256)]
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CrosstalkArgs {
    /// Smallest separation in spot waists.
    #[arg(long, default_value_t = 1.0)]
    pub from: f64,
    /// Largest separation in spot waists.
    #[arg(long, default_value_t = 12.0)]
    pub to: f64,
    #[arg(long, default_value_t = 45)]
    pub points: usize,
    #[arg(long, default_value_t = 64)]
    pub azimuths: usize,
    /// Ignore the configured losses.
    #[arg(long)]
    pub lossless: bool,
    /// Separation range of the power-law fit, in waists.
    #[arg(long, num_args = 2, default_values_t = [3.0, 10.0])]
    pub tail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PulseArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub detuning: f64,
    /// Switch-on time in s.
    #[arg(long, default_value_t = 100e-9)]
    pub start: f64,
    /// Pulse length in s.
    #[arg(long, default_value_t = 1e-6)]
    pub duration: f64,
    /// End of the simulated span in s.
    #[arg(long, default_value_t = 1.4e-6)]
    pub span: f64,
    #[arg(long, default_value_t = 0.1e-9)]
    pub dt: f64,
    /// Side of the square detector aperture in m.
    #[arg(long, default_value_t = 75e-6)]
    pub aperture: f64,
    /// Photodetector bandwidth in Hz; the configured value when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MoveArgs {
    #[arg(long, value_enum, default_value_t = Preset::TwoRamps)]
    pub preset: Preset,
    /// Drive program JSON; replaces the preset.
    #[arg(long)]
    #[serde(skip)]
    pub program: Option<PathBuf>,
    /// Loaded program, kept in the manifest so replays do not need the file.
    #[arg(skip)]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline_program: Option<DriveProgram>,
    /// Frame interval in s.
    #[arg(long, default_value_t = 10e-9)]
    pub frame_dt: f64,
    /// Pixel pitch in m.
    #[arg(long, default_value_t = 2.5e-6)]
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TradeoffArgs {
    /// Beams along the axis.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Internal loss per round trip.
    #[arg(long, default_value_t = 0.01)]
    pub loss: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub kappa_min: f64,
    #[arg(long, default_value_t = 0.3)]
    pub kappa_max: f64,
    #[arg(long, default_value_t = 60)]
    pub points: usize,
    /// Broadening limit for the reported best point.
    #[arg(long, default_value_t = 1.1)]
    pub max_broadening: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Aberration {
    #[default]
    Random,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value_t = Aberration::Random)]
    pub model: Aberration,
    /// Peak aberration phase in rad.
    #[arg(long, default_value_t = PI)]
    pub amplitude: f64,
    /// Detector noise relative to the mean fringe intensity.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 4.0)]
    pub periods: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StabilityArgs {
    /// Samples of the round-trip length scan over (0, 4.2 f).
    #[arg(long, default_value_t = 211)]
    pub points: usize,
}

/// Normalises a parsed command before it is recorded.
pub fn prepare(cmd: Command) -> Result<Command, CliError> {
    Ok(match cmd {
        Command::Move(mut a) => {
            if let Some(p) = a.program.take() {
                a.inline_program =
                    Some(DriveProgram::load(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?);
            }
            Command::Move(a)
        }
        other => other,
    })
}

pub fn run_command(cmd: &Command, cfg: &SystemConfig, seed: u64, art: &Artifacts) -> Result<(), CliError> {
    match cmd {
        Command::Derive => art.json("derived.json", &derive_quantities(&cfg.geometry)?),
        Command::Focal(a) => focal(a, cfg, art),
        Command::Sweep(a) => sweep(a, cfg, art),
        Command::Grid(a) => grid(a, cfg, art),
        Command::Crosstalk(a) => crosstalk(a, cfg, art),
        Command::Pulse(a) => pulse(a, cfg, art),
        Command::Move(a) => movie(a, cfg, art),
        Command::Tradeoff(a) => tradeoff(a, art),
        Command::Budget => budget(cfg, art),
        Command::Calibrate(a) => calibrate(a, cfg, seed, art),
        Command::Stability(a) => stability(a, cfg, art),
        Command::Replay { .. } => Err(CliError::Validation("replay cannot be nested".into())),
    }
}

fn image(art: &Artifacts, stem: &str, grid: &IntensityGrid) -> Result<(), CliError> {
    let mut buf = Vec::new();
    let scale = write_pgm_to(&mut buf, grid, None)?;
    art.bytes(&format!("{stem}.pgm"), &buf)?;
    art.json(
        &format!("{stem}.json"),
        &ImageSidecar {
            dx: grid.dx,
            dy: grid.dy,
            origin: grid.origin,
            z: grid.plane_z,
            scale,
        },
    )
}

fn focal(a: &FocalArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let (_, wy) = g.spot_waists();
    let spacing = a.spacing.unwrap_or(wy / 8.0);
    if !(spacing > 0.0) || a.pixels < 3 {
        return Err(CliError::Validation(
            "focal needs a positive spacing and at least 3 pixels".into(),
        ));
    }
    let arr = synthesize_array(&Tone::at(a.detuning), g, &cfg.loss);
    let target = spot_position(a.detuning, g);
    let grid = match a.solver {
        Solver::Analytic => {
            if a.z != 0.0 {
                return Err(CliError::Validation("off-focal planes need --solver numeric".into()));
            }
            AnalyticFocal::new(&arr, g)
                .sample(&FocalWindow::new(target, spacing, a.pixels))
                .intensity()
        }
        Solver::Numeric => {
            let spec = NumericGridSpec::for_focal_spacing(g, spacing, Some(0.5 * g.bz_extent() + 4.0 * wy));
            let mut field = focal_field_numeric(&arr, g, &spec)?;
            if a.z != 0.0 {
                field = propagate_axial(&field, a.z, g.wavelength)?;
            }
            field.intensity()
        }
    };
    image(art, "focal", &grid)?;
    let opts = SpotFitOptions {
        peak_floor: if a.z != 0.0 {
            0.3
        } else {
            SpotFitOptions::default().peak_floor
        },
        ..SpotFitOptions::default()
    };
    let fit = fit_spot_with(&grid, target, 2.0 * wy, &opts)?;
    art.json(
        "spot.json",
        &json!({
            "detuning_hz": a.detuning,
            "solver": a.solver,
            "z": a.z,
            "addressed": target,
            "fit": fit,
        }),
    )
}

fn sweep(a: &SweepArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    if a.points == 0 {
        return Err(CliError::Validation("sweep needs at least one point".into()));
    }
    let g = &cfg.geometry;
    let fsr1 = g.fsr_1();
    let rows: Vec<Vec<f64>> = (0..a.points)
        .map(|k| {
            let nu = (k as f64 / a.points as f64 - 0.5) * fsr1;
            let (ex, ey) = spot_position(nu, g);
            let (px, py, pi) = peak_in_zone(&synthesize_array(&Tone::at(nu), g, &cfg.loss), g);
            vec![nu, ex, ey, px, py, pi]
        })
        .collect();
    art.rows(
        "sweep.csv",
        &[
            "detuning_hz",
            "addressed_x_m",
            "addressed_y_m",
            "peak_x_m",
            "peak_y_m",
            "peak_intensity",
        ],
        rows,
    )
}

fn grid(a: &GridArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let mut tones = tones_for_grid(a.n, g, a.variant.into())?;
    if a.compensate {
        tones = compensate_envelope(&tones, g)?;
    }
    let window = FocalWindow::new((0.0, 0.0), g.bz_extent() / a.pixels as f64, a.pixels);
    image(art, "grid", &static_image(&tones, g, &cfg.loss, &window)?)?;
    let fits = fit_tone_spots(&tones, g, &cfg.loss)?;
    art.rows(
        "spots.csv",
        &[
            "i",
            "j",
            "detuning_hz",
            "amplitude",
            "x_m",
            "y_m",
            "w_x_m",
            "w_y_m",
            "peak",
        ],
        fits.iter().zip(tones.iter()).enumerate().map(|(k, (f, t))| {
            vec![
                (k / a.n) as f64,
                (k % a.n) as f64,
                t.detuning,
                t.amplitude,
                f.center.0,
                f.center.1,
                f.w_x,
                f.w_y,
                f.peak,
            ]
        }),
    )?;
    let centers: Vec<_> = fits.iter().map(|f| f.center).collect();
    let metrics = match a.variant {
        Lattice::QuasiSquare if a.n > 1 => Some(grid_metrics(&centers, a.n, g)?),
        _ => None,
    };
    let (dx, dy, angle) = quasi_square_geometry(a.n, g);
    art.json(
        "grid.json",
        &json!({
            "n": a.n,
            "variant": a.variant,
            "compensated": a.compensate,
            "measured": metrics,
            "expected": { "d_x": dx, "d_y": dy, "angle": angle },
            "uniformity": uniformity_stats(&fits)?,
        }),
    )
}

fn crosstalk(a: &CrosstalkArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    if a.tail.len() != 2 || !(a.from > 0.0 && a.from < a.to) {
        return Err(CliError::Validation(
            "crosstalk needs 0 < from < to and two tail bounds".into(),
        ));
    }
    let loss = if a.lossless {
        LossModel::lossless()
    } else {
        cfg.loss.clone()
    };
    let opts = CrosstalkOptions {
        n_azimuth: a.azimuths,
        weight: CrosstalkWeight::Gaussian,
        ..CrosstalkOptions::default()
    };
    let curve = crosstalk_curve(&cfg.geometry, &loss, &separation_grid(a.from, a.to, a.points), &opts)?;
    art.rows(
        "crosstalk.csv",
        &["separation_waists", "crosstalk"],
        curve.points.iter().map(|p| vec![p.0, p.1]),
    )?;
    let (fit, fit_error) = match powerlaw_fit(&curve.points, (a.tail[0], a.tail[1])) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    art.json(
        "crosstalk.json",
        &json!({
            "spot_waist": curve.spot_waist,
            "lossless": a.lossless,
            "azimuths": a.azimuths,
            "tail_range": a.tail,
            "fit": fit,
            "fit_error": fit_error,
        }),
    )
}

fn trace_bytes(tr: &TimeTrace) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, tr)?;
    Ok(buf)
}

fn pulse(a: &PulseArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let bw = a.bandwidth.unwrap_or(cfg.drive.detector_bandwidth_hz);
    let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(a.detuning)]), a.start, a.duration);
    let pts = square_aperture(spot_position(a.detuning, g), a.aperture, 16);
    let raw = region_trace(&prog, g, &cfg.loss, &pts, a.dt, (0.0, a.span))?;
    let tr = pd_filter(&raw, bw)?;
    art.bytes("raw.csv", &trace_bytes(&raw)?)?;
    art.bytes("trace.csv", &trace_bytes(&tr)?)?;
    let e = rise_fall(&tr, 0.1, 0.9)?;
    art.json(
        "pulse.json",
        &json!({
            "rise_ns": e.rise * 1e9,
            "fall_ns": e.fall * 1e9,
            "plateau": e.plateau,
            "baseline": e.baseline,
            "bandwidth_hz": bw,
            "warnings": raw.warnings,
        }),
    )
}

fn movie(a: &MoveArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let prog = match &a.inline_program {
        Some(p) => p.clone(),
        None => program(a.preset, g)?,
    };
    prog.validate(g)?;
    if !(a.frame_dt > 0.0) {
        return Err(CliError::Validation("frame interval must be positive".into()));
    }
    let t0 = prog.first_start().unwrap_or(0.0);
    let frames = ((program_end(&prog) - t0) / a.frame_dt).floor() as usize;
    let times: Vec<f64> = (0..=frames).map(|k| t0 + k as f64 * a.frame_dt).collect();
    let window = FocalWindow::new((0.0, 0.0), a.spacing, (g.bz_extent() / a.spacing).round() as usize + 1);
    let opts = MovieOptions {
        min_spacing: a.spacing.min(MovieOptions::default().min_spacing),
        ..MovieOptions::default()
    };
    let mv = simulate_movie(&prog, g, &cfg.loss, &window, &times, &opts)?;
    write_movie(art.path("movie/manifest.json")?.parent().expect("movie dir"), &mv)?;
    let tracks = extract_trajectories(&mv, &TrackOptions::for_geometry(g));
    art.json("program.json", &prog)?;
    art.json("trajectories.json", &tracks)?;
    art.rows(
        "trajectories.csv",
        &["track", "t_s", "x_m", "y_m", "confidence", "flagged"],
        tracks.iter().enumerate().flat_map(|(k, tr)| {
            tr.points
                .iter()
                .map(move |p| vec![k as f64, p.t, p.x, p.y, p.confidence, tr.flagged as u8 as f64])
        }),
    )
}

fn tradeoff(a: &TradeoffArgs, art: &Artifacts) -> Result<(), CliError> {
    let curve = tradeoff_curve(a.n, a.loss, &kappa_grid(a.kappa_min, a.kappa_max, a.points))?;
    art.rows(
        "tradeoff.csv",
        &["kappa", "efficiency", "broadening"],
        curve.points.iter().map(|p| vec![p.kappa, p.efficiency, p.broadening]),
    )?;
    art.json(
        "tradeoff.json",
        &json!({
            "n": a.n,
            "internal_loss": a.loss,
            "markers": curve.markers,
            "max_broadening": a.max_broadening,
            "best_within": curve.best_within(a.max_broadening),
            "small_kappa": tradeoff_point(a.n, a.loss, 1e-6)?,
            "small_kappa_lossless": tradeoff_point(a.n, 0.0, 1e-6)?,
        }),
    )
}

fn budget(cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let b = efficiency_budget(&cfg.loss, &cfg.geometry);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in b.rows() {
        w.serialize(row).map_err(|e| CliError::Numerical(e.to_string()))?;
    }
    let buf = w.into_inner().map_err(|e| CliError::Numerical(e.to_string()))?;
    art.bytes("budget.csv", &buf)?;
    art.json("budget.json", &b)
}

fn calibrate(a: &CalibrateArgs, cfg: &SystemConfig, seed: u64, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let model = match a.model {
        Aberration::Random => AberrationModel::RandomUniform { amplitude: a.amplitude },
        Aberration::Smooth => AberrationModel::SmoothLowOrder { amplitude: a.amplitude },
    };
    let aberr = inject_aberrations(g, model, seed);
    let opts = CalibrationOptions {
        samples: a.samples,
        periods: a.periods,
        noise: a.noise,
        seed: seed.wrapping_add(1),
        ..CalibrationOptions::default()
    };
    let rep = calibrate_and_verify_with(g, &aberr, &opts)?;
    write_mask(art.path("mask.csv")?, &rep.mask, &json_hash(g)?)?;
    art.rows(
        "aberration.csv",
        &["i", "j", "phase_rad"],
        aberr
            .per_beam_phase
            .indexed_iter()
            .map(|((i, j), &p)| vec![i as f64, j as f64, p]),
    )?;
    let fits: Vec<_> = rep
        .fits
        .iter()
        .map(|((i, j), f)| json!({"i": i, "j": j, "i0": f.i0, "gamma": f.gamma, "freq": f.freq, "phase": f.phase}))
        .collect();
    art.json(
        "calibration.json",
        &json!({
            "model": model,
            "aberration_seed": seed,
            "noise_seed": opts.seed,
            "noise": a.noise,
            "reference": rep.mask.reference_index,
            "strehl_before": rep.strehl_before,
            "strehl_after": rep.strehl_after,
            "fits": fits,
        }),
    )
}

fn stability(a: &StabilityArgs, cfg: &SystemConfig, art: &Artifacts) -> Result<(), CliError> {
    let g = &cfg.geometry;
    let f = g.mla_focal;
    // The second stage folds its long delay through unit-magnification
    // telescopes, so its modal round trip is the bare MLA guide.
    art.json(
        "stability.json",
        &json!({
            "stage_1": stability_report(g.roundtrip_1, f, g.wavelength),
            "stage_2": stability_report(2.0 * f, f, g.wavelength),
            "stage_2_delay_length": g.roundtrip_2,
        }),
    )?;
    let n = a.points.max(2);
    art.rows(
        "stability_scan.csv",
        &["roundtrip_m", "half_trace", "stable", "waist_m"],
        (1..=n).map(|k| {
            let l = 4.2 * f * k as f64 / n as f64;
            let r = stability_report(l, f, g.wavelength);
            vec![l, r.half_trace, r.stable as u8 as f64, r.waist.unwrap_or(f64::NAN)]
        }),
    )
}
