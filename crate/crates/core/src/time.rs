//! Time-domain operation: drive programs, round-trip buildup, photodetector
//! response, pulse edges and scanning-detector movies.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayField, ToneSet};
use crate::config::{LossModel, RipaGeometry};
use crate::error::{Error, Result};
use crate::focal::{FocalWindow, IntensityGrid};

/// Coarsest sample step accepted by the trace simulators.
pub const MAX_TRACE_STEP: f64 = 2e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SegmentKind {
    Hold {
        detuning_hz: f64,
        amplitude: f64,
    },
    /// Amplitude `before` until `start + at`, then `after`.
    AmplitudeStep {
        detuning_hz: f64,
        before: f64,
        after: f64,
        at: f64,
    },
    /// Detuning swept linearly over the segment at constant amplitude.
    LinearFrequencyRamp {
        start_hz: f64,
        end_hz: f64,
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
    #[serde(flatten)]
    pub kind: SegmentKind,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    fn detuning_at(&self, tau: f64) -> f64 {
        match self.kind {
            SegmentKind::Hold { detuning_hz, .. } | SegmentKind::AmplitudeStep { detuning_hz, .. } => detuning_hz,
            SegmentKind::LinearFrequencyRamp { start_hz, end_hz, .. } => {
                start_hz + (end_hz - start_hz) * tau / self.duration.max(f64::MIN_POSITIVE)
            }
        }
    }

    /// 2 pi times the integral of the detuning over [0, tau].
    fn phase_at(&self, tau: f64) -> f64 {
        match self.kind {
            SegmentKind::Hold { detuning_hz, .. } | SegmentKind::AmplitudeStep { detuning_hz, .. } => {
                TAU * detuning_hz * tau
            }
            SegmentKind::LinearFrequencyRamp { start_hz, end_hz, .. } => {
                let rate = (end_hz - start_hz) / self.duration.max(f64::MIN_POSITIVE);
                TAU * (start_hz * tau + 0.5 * rate * tau * tau)
            }
        }
    }

    fn amplitude_at(&self, tau: f64) -> f64 {
        match self.kind {
            SegmentKind::Hold { amplitude, .. } | SegmentKind::LinearFrequencyRamp { amplitude, .. } => amplitude,
            SegmentKind::AmplitudeStep { before, after, at, .. } => {
                if tau < at {
                    before
                } else {
                    after
                }
            }
        }
    }

    fn detuning_extremes(&self) -> [f64; 2] {
        match self.kind {
            SegmentKind::Hold { detuning_hz, .. } | SegmentKind::AmplitudeStep { detuning_hz, .. } => {
                [detuning_hz, detuning_hz]
            }
            SegmentKind::LinearFrequencyRamp { start_hz, end_hz, .. } => [start_hz, end_hz],
        }
    }
}

/// Schedule of one tone. The optical phase is continuous across segments:
/// it is the running integral of the detuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    #[serde(default)]
    pub phase_rad: f64,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveProgram {
    pub channels: Vec<Channel>,
}

impl DriveProgram {
    /// Every tone switched on at `start` and held for `duration`.
    pub fn static_tones(tones: &ToneSet, start: f64, duration: f64) -> Self {
        Self {
            channels: tones
                .iter()
                .map(|t| Channel {
                    phase_rad: t.phase,
                    segments: vec![Segment {
                        start,
                        duration,
                        kind: SegmentKind::Hold {
                            detuning_hz: t.detuning,
                            amplitude: t.amplitude,
                        },
                    }],
                })
                .collect(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Checks segment ordering and the detuning range.
    pub fn validate(&self, geom: &RipaGeometry) -> Result<()> {
        let half = geom.fsr_1() / 2.0;
        for (c, ch) in self.channels.iter().enumerate() {
            for (k, s) in ch.segments.iter().enumerate() {
                if !(s.duration >= 0.0) || !s.start.is_finite() {
                    return Err(Error::Argument(format!("channel {c} segment {k}: bad timing")));
                }
                if s.detuning_extremes().iter().any(|v| v.abs() > half) {
                    return Err(Error::Range(format!(
                        "channel {c} segment {k}: detuning leaves +/- FSR_1/2"
                    )));
                }
                if k > 0 && s.start < ch.segments[k - 1].end() - 1e-15 {
                    return Err(Error::Argument(format!(
                        "channel {c}: segment {k} overlaps its predecessor"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Earliest segment start over all channels.
    pub fn first_start(&self) -> Option<f64> {
        self.channels
            .iter()
            .flat_map(|c| c.segments.first().map(|s| s.start))
            .reduce(f64::min)
    }
}

/// Evaluates the complex envelope b(t) = A(t) exp(i (phi - psi(t))) of each channel.
struct Envelopes {
    channels: Vec<(f64, Vec<Segment>, Vec<f64>)>,
}

impl Envelopes {
    fn new(prog: &DriveProgram) -> Self {
        let channels = prog
            .channels
            .iter()
            .map(|ch| {
                let mut acc = 0.0;
                let mut offsets = Vec::with_capacity(ch.segments.len());
                for s in &ch.segments {
                    offsets.push(acc);
                    acc += s.phase_at(s.duration);
                }
                (ch.phase_rad, ch.segments.clone(), offsets)
            })
            .collect();
        Self { channels }
    }

    fn locate(segments: &[Segment], t: f64) -> Option<usize> {
        let k = segments.partition_point(|s| s.start <= t);
        if k == 0 {
            return None;
        }
        let s = &segments[k - 1];
        (t < s.end()).then_some(k - 1)
    }

    fn value(&self, ch: usize, t: f64) -> Complex64 {
        let (phi, segs, offs) = &self.channels[ch];
        match Self::locate(segs, t) {
            None => Complex64::default(),
            Some(k) => {
                let s = &segs[k];
                let tau = t - s.start;
                let psi = offs[k] + s.phase_at(tau);
                Complex64::from_polar(s.amplitude_at(tau), phi - psi)
            }
        }
    }

    fn detuning(&self, ch: usize, t: f64) -> Option<f64> {
        let (_, segs, _) = &self.channels[ch];
        Self::locate(segs, t).map(|k| segs[k].detuning_at(t - segs[k].start))
    }

    /// Sum over channels.
    fn total(&self, t: f64) -> Complex64 {
        (0..self.channels.len()).map(|c| self.value(c, t)).sum()
    }
}

/// Shared per-beam data: amplitude decay and round-trip delay.
struct Beams {
    nx: usize,
    ny: usize,
    weight: Vec<f64>,
    delay: Vec<f64>,
}

impl Beams {
    fn new(geom: &RipaGeometry, loss: &LossModel) -> Self {
        let (rx, ry) = loss.amplitude_decay();
        let (nx, ny) = (geom.n_cols, geom.n_rows);
        let (t2, t1) = (geom.delay_2(), geom.delay_1());
        let mut weight = Vec::with_capacity(nx * ny);
        let mut delay = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                weight.push(rx.powi(i as i32) * ry.powi(j as i32));
                delay.push(i as f64 * t2 + j as f64 * t1);
            }
        }
        Self { nx, ny, weight, delay }
    }

    /// Beam coefficients c_ij(t) = w_ij sum_k b_k(t - d_ij), row-major (i, j).
    fn coefficients(&self, env: &Envelopes, t: f64, out: &mut [Complex64]) {
        for ((o, &w), &d) in out.iter_mut().zip(&self.weight).zip(&self.delay) {
            *o = env.total(t - d) * w;
        }
    }

    fn buildup(&self) -> f64 {
        self.delay.iter().cloned().fold(0.0, f64::max)
    }
}

/// Per-point spatial factors u_ij(x, y) including envelope and prefactor.
fn spatial_vector(geom: &RipaGeometry, nx: usize, ny: usize, p: (f64, f64)) -> Vec<Complex64> {
    let l = geom.bz_extent();
    let w0 = geom.mode_waist();
    let we = geom.envelope_waist();
    let pref = std::f64::consts::PI * w0 * w0 / (geom.wavelength * geom.focus_focal)
        * (-(p.0 * p.0 + p.1 * p.1) / (we * we)).exp();
    let mut u = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            u.push(Complex64::from_polar(
                pref,
                -TAU * (i as f64 * p.0 + j as f64 * p.1) / l,
            ));
        }
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeTrace {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    /// Non-fatal diagnostics, e.g. a span shorter than the buildup time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TimeTrace {
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.values.len()).map(|k| self.time(k)).collect()
    }
}

fn sample_times(dt: f64, t_span: (f64, f64)) -> Result<Vec<f64>> {
    if !(dt > 0.0) || dt > MAX_TRACE_STEP {
        return Err(Error::Argument(format!("dt must lie in (0, 2 ns], got {dt:e}")));
    }
    if !(t_span.1 > t_span.0) {
        return Err(Error::Argument("empty time span".into()));
    }
    let n = ((t_span.1 - t_span.0) / dt).floor() as usize + 1;
    Ok((0..n).map(|k| t_span.0 + k as f64 * dt).collect())
}

fn span_warnings(beams: &Beams, t_span: (f64, f64)) -> Vec<String> {
    let b = beams.buildup();
    if t_span.1 - t_span.0 < b {
        vec![format!(
            "span {:.3e} s is shorter than the array buildup {b:.3e} s",
            t_span.1 - t_span.0
        )]
    } else {
        Vec::new()
    }
}

/// Raw (pre-detector) focal intensity at one point versus time.
pub fn point_trace(
    prog: &DriveProgram,
    geom: &RipaGeometry,
    loss: &LossModel,
    point: (f64, f64),
    dt: f64,
    t_span: (f64, f64),
) -> Result<TimeTrace> {
    let l = geom.bz_extent();
    if point.0.abs() > l / 2.0 || point.1.abs() > l / 2.0 {
        return Err(Error::Range("trace point outside the first Brillouin zone".into()));
    }
    prog.validate(geom)?;
    let times = sample_times(dt, t_span)?;
    let env = Envelopes::new(prog);
    let beams = Beams::new(geom, loss);
    let u = spatial_vector(geom, beams.nx, beams.ny, point);
    let values = times
        .par_iter()
        .map(|&t| {
            let mut c = vec![Complex64::default(); u.len()];
            beams.coefficients(&env, t, &mut c);
            c.iter().zip(&u).map(|(a, b)| a * b).sum::<Complex64>().norm_sqr()
        })
        .collect();
    Ok(TimeTrace {
        t0: t_span.0,
        dt,
        values,
        warnings: span_warnings(&beams, t_span),
    })
}

/// Intensity averaged over a set of points (a detector aperture), before
/// any detector filtering.
pub fn region_trace(
    prog: &DriveProgram,
    geom: &RipaGeometry,
    loss: &LossModel,
    points: &[(f64, f64)],
    dt: f64,
    t_span: (f64, f64),
) -> Result<TimeTrace> {
    if points.is_empty() {
        return Err(Error::Argument("empty detector region".into()));
    }
    prog.validate(geom)?;
    let times = sample_times(dt, t_span)?;
    let env = Envelopes::new(prog);
    let beams = Beams::new(geom, loss);
    let m = beams.nx * beams.ny;
    // Gram matrix G = mean_p u_p u_p^H, so <|field|^2> = c^T G' c with u conjugation folded in.
    let mut gram = vec![Complex64::default(); m * m];
    for &p in points {
        let u = spatial_vector(geom, beams.nx, beams.ny, p);
        for a in 0..m {
            for b in 0..m {
                gram[a * m + b] += u[a].conj() * u[b];
            }
        }
    }
    let inv = 1.0 / points.len() as f64;
    gram.iter_mut().for_each(|g| *g *= inv);
    let values = times
        .par_iter()
        .map(|&t| {
            let mut c = vec![Complex64::default(); m];
            beams.coefficients(&env, t, &mut c);
            let mut acc = Complex64::default();
            for a in 0..m {
                let row: Complex64 = (0..m).map(|b| gram[a * m + b] * c[b]).sum();
                acc += c[a].conj() * row;
            }
            acc.re.max(0.0)
        })
        .collect();
    Ok(TimeTrace {
        t0: t_span.0,
        dt,
        values,
        warnings: span_warnings(&beams, t_span),
    })
}

/// Square detector aperture of side `side`, sampled `n x n`, centred on `center`.
pub fn square_aperture(center: (f64, f64), side: f64, n: usize) -> Vec<(f64, f64)> {
    let c: Vec<f64> = (0..n)
        .map(|k| {
            if n == 1 {
                0.0
            } else {
                -side / 2.0 + side * k as f64 / (n - 1) as f64
            }
        })
        .collect();
    c.iter()
        .flat_map(|&x| c.iter().map(move |&y| (center.0 + x, center.1 + y)))
        .collect()
}

/// First-order low-pass photodetector with unit DC gain.
pub fn pd_filter(trace: &TimeTrace, f3db: f64) -> Result<TimeTrace> {
    pd_filter_order(trace, f3db, 1)
}

/// Cascade of `order` identical single-pole sections, each
/// y_k = a y_{k-1} + (1 - a) x_k with a = exp(-2 pi f3db dt).
pub fn pd_filter_order(trace: &TimeTrace, f3db: f64, order: usize) -> Result<TimeTrace> {
    if !(f3db > 0.0) {
        return Err(Error::Argument("detector bandwidth must be positive".into()));
    }
    let a = (-TAU * f3db * trace.dt).exp();
    let mut values = trace.values.clone();
    for _ in 0..order.max(1) {
        let mut y = 0.0;
        for v in values.iter_mut() {
            y = a * y + (1.0 - a) * *v;
            *v = y;
        }
    }
    Ok(TimeTrace {
        values,
        ..trace.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeTimes {
    pub rise: f64,
    pub fall: f64,
    pub plateau: f64,
    pub baseline: f64,
}

/// 10-90 style rise and fall times of a single on/off pulse.
///
/// The plateau is the median of the middle half of the interval where the
/// trace exceeds half its maximum; crossings are linearly interpolated.
pub fn rise_fall(trace: &TimeTrace, lo: f64, hi: f64) -> Result<EdgeTimes> {
    let v = &trace.values;
    if v.len() < 4 || !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Shape("trace too short or thresholds out of order".into()));
    }
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let baseline = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let half = baseline + 0.5 * (vmax - baseline);
    let first = v
        .iter()
        .position(|&x| x >= half)
        .ok_or_else(|| Error::Shape("no pulse".into()))?;
    let last = v.iter().rposition(|&x| x >= half).expect("found first");
    let (a, b) = (first + (last - first) / 4, last - (last - first) / 4);
    let mut mid: Vec<f64> = v[a..=b.max(a)].to_vec();
    mid.sort_by(f64::total_cmp);
    let plateau = mid[mid.len() / 2];
    let level = |f: f64| baseline + f * (plateau - baseline);

    let up = |from: usize, target: f64| -> Option<f64> {
        (from.max(1)..v.len())
            .find(|&k| v[k - 1] < target && v[k] >= target)
            .map(|k| trace.time(k - 1) + (target - v[k - 1]) / (v[k] - v[k - 1]) * trace.dt)
    };
    let down = |from: usize, target: f64| -> Option<f64> {
        (from.max(1)..v.len())
            .find(|&k| v[k - 1] > target && v[k] <= target)
            .map(|k| trace.time(k - 1) + (v[k - 1] - target) / (v[k - 1] - v[k]) * trace.dt)
    };
    let missing = || Error::Shape("threshold never crossed".into());
    let t_lo = up(0, level(lo)).ok_or_else(missing)?;
    let t_hi = up(0, level(hi)).ok_or_else(missing)?;
    // Falling edge: last time the trace leaves the high level.
    let fall_start = (1..v.len())
        .rev()
        .find(|&k| v[k - 1] > level(hi) && v[k] <= level(hi))
        .ok_or_else(missing)?;
    let f_hi = down(fall_start, level(hi)).ok_or_else(missing)?;
    let f_lo = down(fall_start, level(lo)).ok_or_else(missing)?;
    Ok(EdgeTimes {
        rise: t_hi - t_lo,
        fall: f_lo - f_hi,
        plateau,
        baseline,
    })
}

/// Stack of intensity frames on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Movie {
    pub frames: Vec<(f64, IntensityGrid)>,
    pub resolution: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovieOptions {
    /// Smallest pixel pitch accepted (scanning-detector step).
    pub min_spacing: f64,
    /// Cap on frames x pixels.
    pub max_samples: usize,
}

impl Default for MovieOptions {
    fn default() -> Self {
        Self {
            min_spacing: 5e-6,
            max_samples: 50_000_000,
        }
    }
}

/// Per-pixel point traces evaluated at the frame times.
pub fn simulate_movie(
    prog: &DriveProgram,
    geom: &RipaGeometry,
    loss: &LossModel,
    grid: &FocalWindow,
    frame_times: &[f64],
    opts: &MovieOptions,
) -> Result<Movie> {
    if grid.spacing < opts.min_spacing {
        return Err(Error::Argument(format!(
            "pixel pitch {:.2e} m below the configured minimum {:.2e} m",
            grid.spacing, opts.min_spacing
        )));
    }
    if frame_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("frame times must increase strictly".into()));
    }
    let pixels = grid.n.0 * grid.n.1;
    if pixels.saturating_mul(frame_times.len()) > opts.max_samples {
        return Err(Error::Resource(format!(
            "{} frames x {pixels} pixels exceeds the cap of {}",
            frame_times.len(),
            opts.max_samples
        )));
    }
    prog.validate(geom)?;
    let env = Envelopes::new(prog);
    let beams = Beams::new(geom, loss);
    let (nx, ny) = (beams.nx, beams.ny);
    let l = geom.bz_extent();
    let origin = grid.origin();
    let xs: Vec<f64> = (0..grid.n.0).map(|k| origin.0 + k as f64 * grid.spacing).collect();
    let ys: Vec<f64> = (0..grid.n.1).map(|k| origin.1 + k as f64 * grid.spacing).collect();
    let phasors = |coords: &[f64], n: usize| -> Array2<Complex64> {
        Array2::from_shape_fn((coords.len(), n), |(p, i)| {
            Complex64::from_polar(1.0, -TAU * i as f64 * coords[p] / l)
        })
    };
    let ex = phasors(&xs, nx);
    let ey = phasors(&ys, ny);
    let w0 = geom.mode_waist();
    let we = geom.envelope_waist();
    let pref = std::f64::consts::PI * w0 * w0 / (geom.wavelength * geom.focus_focal);

    let frames = frame_times
        .par_iter()
        .map(|&t| {
            let mut c = vec![Complex64::default(); nx * ny];
            beams.coefficients(&env, t, &mut c);
            // rows[p, i] = sum_j c_ij ey[p, j]
            let rows = Array2::from_shape_fn((ys.len(), nx), |(p, i)| {
                (0..ny).map(|j| c[i * ny + j] * ey[[p, j]]).sum::<Complex64>()
            });
            let values = Array2::from_shape_fn((xs.len(), ys.len()), |(a, b)| {
                let f: Complex64 = (0..nx).map(|i| ex[[a, i]] * rows[[b, i]]).sum();
                let e = pref * (-(xs[a] * xs[a] + ys[b] * ys[b]) / (we * we)).exp();
                f.norm_sqr() * e * e
            });
            (
                t,
                IntensityGrid {
                    values,
                    dx: grid.spacing,
                    dy: grid.spacing,
                    origin,
                    plane_z: 0.0,
                },
            )
        })
        .collect();
    Ok(Movie {
        frames,
        resolution: grid.spacing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Peak height relative to the brightest sample of its frame.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrackPoint>,
    /// Set when association was ambiguous (spots closer than the separation floor).
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOptions {
    /// Detections below this fraction of the frame maximum are ignored.
    pub peak_floor: f64,
    /// Detections closer than this are treated as a crossing.
    pub min_separation: f64,
    /// Largest allowed jump between consecutive frames.
    pub max_step: f64,
}

impl TrackOptions {
    pub fn for_geometry(geom: &RipaGeometry) -> Self {
        let (_, wy) = geom.spot_waists();
        Self {
            peak_floor: 0.3,
            min_separation: 2.0 * wy,
            max_step: geom.bz_extent() / 4.0,
        }
    }
}

/// Peak detection per frame and greedy nearest-neighbour linking.
pub fn extract_trajectories(movie: &Movie, opts: &TrackOptions) -> Vec<Trajectory> {
    let mut tracks: Vec<Trajectory> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for (t, frame) in &movie.frames {
        let fmax = frame.max();
        let dets: Vec<TrackPoint> = if fmax > 0.0 {
            frame
                .local_maxima(opts.peak_floor * fmax)
                .into_iter()
                .map(|(ix, iy, _)| {
                    let (x, y, v) = frame.refine_peak(ix, iy);
                    TrackPoint {
                        t: *t,
                        x,
                        y,
                        confidence: (v / fmax).min(1.0),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let crowded: Vec<bool> = dets
            .iter()
            .enumerate()
            .map(|(a, p)| {
                dets.iter()
                    .enumerate()
                    .any(|(b, q)| a != b && (p.x - q.x).hypot(p.y - q.y) < opts.min_separation)
            })
            .collect();

        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ai, &tr) in active.iter().enumerate() {
            let last = tracks[tr].points.last().expect("active track has points");
            for (d, p) in dets.iter().enumerate() {
                let dist = (p.x - last.x).hypot(p.y - last.y);
                if dist <= opts.max_step {
                    pairs.push((dist, ai, d));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; active.len()];
        let mut det_used = vec![false; dets.len()];
        let mut det_claims = vec![0usize; dets.len()];
        for &(_, _, d) in &pairs {
            det_claims[d] += 1;
        }
        let mut next_active = Vec::new();
        for &(_, ai, d) in &pairs {
            if track_used[ai] || det_used[d] {
                continue;
            }
            track_used[ai] = true;
            det_used[d] = true;
            let tr = active[ai];
            if crowded[d] || det_claims[d] > 1 {
                tracks[tr].flagged = true;
            }
            tracks[tr].points.push(dets[d]);
            next_active.push(tr);
        }
        for (ai, used) in track_used.iter().enumerate() {
            // A track losing its spot while others compete for one detection
            // is a merge; mark it rather than silently dropping it.
            if !used && det_claims.iter().any(|&c| c > 1) {
                tracks[active[ai]].flagged = true;
            }
        }
        for (d, p) in dets.iter().enumerate() {
            if !det_used[d] {
                tracks.push(Trajectory {
                    points: vec![*p],
                    flagged: crowded[d],
                });
                next_active.push(tracks.len() - 1);
            }
        }
        next_active.sort_unstable();
        active = next_active;
    }
    tracks
}

/// Array frozen in the middle of a linear chirp at `sweep_rate` (Hz/s),
/// centred on zero detuning. Each beam sees the drive at its retarded time.
pub fn chirped_array(geom: &RipaGeometry, loss: &LossModel, sweep_rate: f64) -> Result<ArrayField> {
    let beams = Beams::new(geom, loss);
    let duration = (4.0 * beams.buildup()).max(1e-6);
    let half = 0.5 * sweep_rate * duration;
    let kind = if sweep_rate == 0.0 {
        SegmentKind::Hold {
            detuning_hz: 0.0,
            amplitude: 1.0,
        }
    } else {
        SegmentKind::LinearFrequencyRamp {
            start_hz: -half,
            end_hz: half,
            amplitude: 1.0,
        }
    };
    let prog = DriveProgram {
        channels: vec![Channel {
            phase_rad: 0.0,
            segments: vec![Segment {
                start: 0.0,
                duration,
                kind,
            }],
        }],
    };
    let env = Envelopes::new(&prog);
    let mut c = vec![Complex64::default(); beams.nx * beams.ny];
    beams.coefficients(&env, duration / 2.0, &mut c);
    let amps = Array2::from_shape_vec((beams.nx, beams.ny), c).expect("beam count");
    Ok(ArrayField::from_amplitudes(amps, geom.mla_pitch, geom.mode_waist()))
}

/// Instantaneous detuning of each channel at time `t` (None when off).
pub fn channel_detunings(prog: &DriveProgram, t: f64) -> Vec<Option<f64>> {
    let env = Envelopes::new(prog);
    (0..prog.channels.len()).map(|c| env.detuning(c, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{synthesize_array, Tone};
    use crate::focal::focal_intensity_analytic;

    fn paper() -> RipaGeometry {
        RipaGeometry::default()
    }

    #[test]
    fn steady_state_matches_static_solver() {
        let g = paper();
        let loss = LossModel::default();
        let tone = Tone::new(21e6, 1.4, 0.3);
        let prog = DriveProgram::static_tones(&ToneSet(vec![tone]), 0.0, 1e-6);
        let p = (12e-6, -9e-6);
        let tr = point_trace(&prog, &g, &loss, p, 1e-9, (0.5e-6, 0.6e-6)).unwrap();
        let want = focal_intensity_analytic(&synthesize_array(&tone, &g, &loss), &g, p);
        for v in &tr.values {
            assert!((v / want - 1.0).abs() < 1e-9, "{v} vs {want}");
        }
    }

    #[test]
    fn causal_and_quadratic_staircase() {
        let g = paper().with_counts(8, 1);
        let loss = LossModel::lossless();
        let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), 100e-9, 1e-6);
        let t2 = g.delay_2();
        let tr = point_trace(&prog, &g, &loss, (0.0, 0.0), 0.5e-9, (0.0, 100e-9 + 9.0 * t2)).unwrap();
        let unit = focal_intensity_analytic(
            &synthesize_array(&Tone::at(0.0), &g.with_counts(1, 1), &loss),
            &g,
            (0.0, 0.0),
        );
        for (k, v) in tr.values.iter().enumerate() {
            let t = tr.time(k);
            if t < 100e-9 {
                assert_eq!(*v, 0.0);
            } else {
                let on = (((t - 100e-9) / t2).floor() as usize + 1).min(8);
                // Skip samples within rounding of a step edge.
                if ((t - 100e-9) / t2).fract() > 1e-6 {
                    assert!((v / unit - (on * on) as f64).abs() < 1e-9, "t={t} v={}", v / unit);
                }
            }
        }
    }

    #[test]
    fn two_tone_beat() {
        let g = paper();
        let loss = LossModel::lossless();
        let f_beat = 78e6;
        let tones = ToneSet(vec![Tone::at(-f_beat / 2.0), Tone::at(f_beat / 2.0)]);
        let prog = DriveProgram::static_tones(&tones, 0.0, 2e-6);
        let tr = point_trace(&prog, &g, &loss, (0.0, 0.0), 0.25e-9, (1e-6, 1.2e-6)).unwrap();
        let mean = tr.values.iter().sum::<f64>() / tr.values.len() as f64;
        let x: Vec<f64> = tr.values.iter().map(|v| v - mean).collect();
        let power = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, v) in x.iter().enumerate() {
                let ph = TAU * f * tr.time(k);
                re += v * ph.cos();
                im += v * ph.sin();
            }
            re * re + im * im
        };
        assert!(power(f_beat) > 100.0 * power(0.6 * f_beat));
        assert!(power(f_beat) > 100.0 * power(1.4 * f_beat));
    }

    #[test]
    fn linear_in_drive_power() {
        let g = paper();
        let loss = LossModel::default();
        let a = DriveProgram::static_tones(&ToneSet(vec![Tone::at(5e6), Tone::at(40e6)]), 0.0, 3e-7);
        let b = DriveProgram::static_tones(
            &ToneSet(vec![Tone::new(5e6, 2.0, 0.0), Tone::new(40e6, 2.0, 0.0)]),
            0.0,
            3e-7,
        );
        let ta = point_trace(&a, &g, &loss, (3e-6, 1e-6), 1e-9, (0.0, 4e-7)).unwrap();
        let tb = point_trace(&b, &g, &loss, (3e-6, 1e-6), 1e-9, (0.0, 4e-7)).unwrap();
        for (x, y) in ta.values.iter().zip(&tb.values) {
            assert!((4.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn detector_filter() {
        let flat = TimeTrace {
            t0: 0.0,
            dt: 1e-10,
            values: vec![3.0; 100],
            warnings: vec![],
        };
        let f = pd_filter(&flat, 50e6).unwrap();
        assert!((f.values[0] - 3.0 * (1.0 - (-TAU * 50e6 * 1e-10f64).exp())).abs() < 1e-12);
        let mut step = vec![0.0; 100];
        step.extend(vec![1.0; 20000]);
        step.extend(vec![0.0; 5000]);
        let tr = TimeTrace {
            t0: 0.0,
            dt: 1e-11,
            values: step,
            warnings: vec![],
        };
        let e = rise_fall(&pd_filter(&tr, 50e6).unwrap(), 0.1, 0.9).unwrap();
        let want = 9f64.ln() / (TAU * 50e6);
        assert!((e.rise - want).abs() < 0.02e-9, "{}", e.rise);
        assert!((e.fall - want).abs() < 0.02e-9, "{}", e.fall);
        let ideal = rise_fall(&tr, 0.1, 0.9).unwrap();
        assert!(ideal.rise < tr.dt && ideal.fall < tr.dt);
    }

    #[test]
    fn constant_trace_has_no_edges() {
        let tr = TimeTrace {
            t0: 0.0,
            dt: 1e-9,
            values: vec![1.0; 50],
            warnings: vec![],
        };
        assert!(matches!(rise_fall(&tr, 0.1, 0.9), Err(Error::Shape(_))));
    }

    #[test]
    fn short_span_warns() {
        let g = paper();
        let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), 0.0, 1e-6);
        let tr = point_trace(&prog, &g, &LossModel::default(), (0.0, 0.0), 1e-9, (0.0, 20e-9)).unwrap();
        assert_eq!(tr.warnings.len(), 1);
        assert!(point_trace(&prog, &g, &LossModel::default(), (0.0, 0.0), 5e-9, (0.0, 1e-7)).is_err());
    }

    #[test]
    fn ramp_phase_is_continuous() {
        let seg = |start, dur, a, b| Segment {
            start,
            duration: dur,
            kind: SegmentKind::LinearFrequencyRamp {
                start_hz: a,
                end_hz: b,
                amplitude: 1.0,
            },
        };
        let prog = DriveProgram {
            channels: vec![Channel {
                phase_rad: 0.0,
                segments: vec![seg(0.0, 1e-7, 0.0, 50e6), seg(1e-7, 1e-7, 50e6, -20e6)],
            }],
        };
        let env = Envelopes::new(&prog);
        let before = env.value(0, 1e-7 - 1e-15);
        let after = env.value(0, 1e-7);
        assert!((before - after).norm() < 1e-6);
        assert_eq!(channel_detunings(&prog, 0.5e-7), vec![Some(25e6)]);
        assert_eq!(channel_detunings(&prog, 3e-7), vec![None]);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let hold = |start| Segment {
            start,
            duration: 1e-7,
            kind: SegmentKind::Hold {
                detuning_hz: 0.0,
                amplitude: 1.0,
            },
        };
        let prog = DriveProgram {
            channels: vec![Channel {
                phase_rad: 0.0,
                segments: vec![hold(0.0), hold(0.5e-7)],
            }],
        };
        assert!(prog.validate(&paper()).is_err());
    }

    #[test]
    fn program_json_roundtrip() {
        let text = r#"{"channels":[{"segments":[
            {"start":0.0,"duration":1e-7,"kind":"hold","detuning_hz":1e6,"amplitude":1.0},
            {"start":1e-7,"duration":1e-7,"kind":"amplitude-step","detuning_hz":1e6,"before":1.0,"after":0.0,"at":5e-8},
            {"start":2e-7,"duration":2e-7,"kind":"linear-frequency-ramp","start_hz":1e6,"end_hz":3e6,"amplitude":1.0}
        ]}]}"#;
        let p = DriveProgram::from_json_str(text).unwrap();
        assert_eq!(p.channels[0].segments.len(), 3);
        let back = DriveProgram::from_json_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn static_movie_frames_identical() {
        let g = paper();
        let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(30e6)]), 0.0, 2e-6);
        let win = FocalWindow::new((0.0, 0.0), 5e-6, 31);
        let m = simulate_movie(
            &prog,
            &g,
            &LossModel::default(),
            &win,
            &[0.5e-6, 0.8e-6, 1.1e-6],
            &MovieOptions::default(),
        )
        .unwrap();
        let top = m.frames[0].1.max();
        for (a, b) in m.frames[0].1.values.iter().zip(m.frames[2].1.values.iter()) {
            assert!((a - b).abs() <= 1e-10 * top);
        }
        let small = FocalWindow::new((0.0, 0.0), 1e-6, 31);
        assert!(simulate_movie(
            &prog,
            &g,
            &LossModel::default(),
            &small,
            &[1e-6],
            &MovieOptions::default()
        )
        .is_err());
        let capped = MovieOptions {
            max_samples: 100,
            ..MovieOptions::default()
        };
        assert!(matches!(
            simulate_movie(&prog, &g, &LossModel::default(), &win, &[1e-6], &capped),
            Err(Error::Resource(_))
        ));
    }
}
