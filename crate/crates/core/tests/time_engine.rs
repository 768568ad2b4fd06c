use ripa_core::analysis::{crosstalk_at_with, CrosstalkOptions};
use ripa_core::array::{spot_position, synthesize_array, Tone, ToneSet};
use ripa_core::config::{LossModel, RipaGeometry};
use ripa_core::drive::tones_for_spots;
use ripa_core::focal::{fit_spot_with, focal_intensity_analytic, FocalWindow, SpotFitOptions};
use ripa_core::time::{
    extract_trajectories, pd_filter, point_trace, region_trace, rise_fall, simulate_movie, square_aperture, Channel,
    DriveProgram, Movie, MovieOptions, Segment, SegmentKind, TrackOptions,
};

const PD_BANDWIDTH: f64 = 50e6;

fn paper() -> RipaGeometry {
    RipaGeometry::default()
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

fn pulse_edges() -> ripa_core::time::EdgeTimes {
    let g = paper();
    let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), 100e-9, 1e-6);
    let pts = square_aperture((0.0, 0.0), 75e-6, 16);
    let raw = region_trace(&prog, &g, &LossModel::default(), &pts, 0.1e-9, (0.0, 1.4e-6)).unwrap();
    rise_fall(&pd_filter(&raw, PD_BANDWIDTH).unwrap(), 0.1, 0.9).unwrap()
}

#[test]
fn paper_pulse_edges() {
    let e = pulse_edges();
    let (rise, fall) = (e.rise * 1e9, e.fall * 1e9);
    assert!((rise - 44.0).abs() <= 10.0, "rise {rise} ns");
    assert!((fall - 44.0).abs() <= 10.0, "fall {fall} ns");
    assert!((rise - fall).abs() <= 5.0, "rise {rise} fall {fall}");
}

#[test]
fn plateau_ripple_below_one_percent() {
    let g = paper();
    let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), 100e-9, 1e-6);
    let pts = square_aperture((0.0, 0.0), 75e-6, 16);
    let raw = region_trace(&prog, &g, &LossModel::default(), &pts, 0.5e-9, (0.0, 1.4e-6)).unwrap();
    let tr = pd_filter(&raw, PD_BANDWIDTH).unwrap();
    let e = rise_fall(&tr, 0.1, 0.9).unwrap();
    let peak = tr.values.iter().cloned().fold(0.0, f64::max);
    assert!((peak - e.plateau) / peak < 0.01);
}

#[test]
fn buildup_within_bound() {
    let g = paper();
    let loss = LossModel::default();
    let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(0.0)]), 0.0, 2e-6);
    let dt = 0.1e-9;
    let tr = pd_filter(
        &point_trace(&prog, &g, &loss, (0.0, 0.0), dt, (-50e-9, 400e-9)).unwrap(),
        PD_BANDWIDTH,
    )
    .unwrap();
    let plateau = *tr.values.last().unwrap();
    let first = tr.values.iter().position(|&v| v > 0.0).unwrap();
    assert!(tr.time(first) >= 0.0);
    let settled = tr.values.iter().position(|&v| v >= 0.99 * plateau).unwrap();
    let bound =
        g.n_cols as f64 * g.delay_2() + g.n_rows as f64 * g.delay_1() + 5.0 / (std::f64::consts::TAU * PD_BANDWIDTH);
    let took = tr.time(settled) - tr.time(first);
    assert!(took <= bound, "buildup {took:e} s > {bound:e} s");
    // Long-time limit is the static solver value.
    let want = focal_intensity_analytic(&synthesize_array(&Tone::at(0.0), &g, &loss), &g, (0.0, 0.0));
    assert!((plateau / want - 1.0).abs() < 1e-6);
}

fn movie_window(g: &RipaGeometry) -> FocalWindow {
    let l = g.bz_extent();
    FocalWindow::new((0.0, 0.0), 2.5e-6, (l / 2.5e-6).round() as usize + 1)
}

fn movie(prog: &DriveProgram, times: &[f64]) -> Movie {
    let g = paper();
    let opts = MovieOptions {
        min_spacing: 2e-6,
        ..MovieOptions::default()
    };
    simulate_movie(prog, &g, &LossModel::default(), &movie_window(&g), times, &opts).unwrap()
}

#[test]
fn two_ramped_spots_keep_their_shape() {
    let g = paper();
    let fsr = g.fsr_2();
    let prog = DriveProgram {
        channels: vec![
            channel(vec![
                hold(0.0, 100e-9, -0.40 * fsr),
                ramp(100e-9, 200e-9, -0.40 * fsr, -0.05 * fsr),
            ]),
            channel(vec![
                hold(0.0, 100e-9, 0.05 * fsr),
                ramp(100e-9, 200e-9, 0.05 * fsr, 0.40 * fsr),
            ]),
        ],
    };
    let times: Vec<f64> = (0..=12).map(|k| 180e-9 + 10e-9 * k as f64).collect();
    let mv = movie(&prog, &times);
    let static_w = g.spot_waists();
    let opts = SpotFitOptions {
        peak_floor: 0.3,
        ..SpotFitOptions::default()
    };
    let mut fitted = 0;
    for (_, frame) in &mv.frames {
        let peaks = frame.local_maxima(0.5 * frame.max());
        assert_eq!(peaks.len(), 2, "{} peaks", peaks.len());
        for (ix, iy, _) in peaks {
            let c = (frame.x(ix), frame.y(iy));
            let fit = fit_spot_with(frame, c, 1.5 * static_w.1, &opts).unwrap();
            assert!((fit.w_y / static_w.1 - 1.0).abs() < 0.1, "w_y {:e}", fit.w_y);
            fitted += 1;
        }
    }
    assert_eq!(fitted, 2 * times.len());
}

#[test]
fn ramp_trajectory_slope_follows_frequency_map() {
    let g = paper();
    let fsr = g.fsr_2();
    let (t_ramp, span) = (1e-6, 0.8 * fsr);
    let prog = DriveProgram {
        channels: vec![channel(vec![ramp(0.0, t_ramp, -span / 2.0, span / 2.0)])],
    };
    let times: Vec<f64> = (0..=30).map(|k| 150e-9 + 25e-9 * k as f64).collect();
    let mv = movie(&prog, &times);
    let tracks = extract_trajectories(&mv, &TrackOptions::for_geometry(&g));
    let main = tracks.iter().max_by_key(|t| t.points.len()).unwrap();
    assert_eq!(main.points.len(), times.len());
    assert!(!main.flagged);
    let n = main.points.len() as f64;
    let (mt, mx) = (
        main.points.iter().map(|p| p.t).sum::<f64>() / n,
        main.points.iter().map(|p| p.x).sum::<f64>() / n,
    );
    let slope = main.points.iter().map(|p| (p.t - mt) * (p.x - mx)).sum::<f64>()
        / main.points.iter().map(|p| (p.t - mt).powi(2)).sum::<f64>();
    let want = g.bz_extent() / fsr * (span / t_ramp);
    assert!((slope / want - 1.0).abs() < 0.05, "slope {slope:e} vs {want:e}");
}

#[test]
fn static_spot_has_constant_path() {
    let g = paper();
    let nu = 20e6;
    let prog = DriveProgram::static_tones(&ToneSet(vec![Tone::at(nu)]), 0.0, 1e-6);
    let times: Vec<f64> = (0..6).map(|k| 200e-9 + 50e-9 * k as f64).collect();
    let tracks = extract_trajectories(&movie(&prog, &times), &TrackOptions::for_geometry(&g));
    assert_eq!(tracks.len(), 1);
    let want = spot_position(nu, &g);
    for p in &tracks[0].points {
        assert!((p.x - want.0).abs() < 1e-6 && (p.y - want.1).abs() < 1e-6, "{p:?}");
    }
}

#[test]
fn split_and_merge_branches_and_rejoins() {
    let g = paper();
    let fsr = g.fsr_2();
    let d = 0.25 * fsr;
    let prog = DriveProgram {
        channels: vec![
            channel(vec![
                hold(0.0, 150e-9, 0.0),
                ramp(150e-9, 200e-9, 0.0, -d),
                hold(350e-9, 150e-9, -d),
                ramp(500e-9, 200e-9, -d, 0.0),
                hold(700e-9, 300e-9, 0.0),
            ]),
            channel(vec![
                hold(0.0, 150e-9, 0.0),
                ramp(150e-9, 200e-9, 0.0, d),
                hold(350e-9, 150e-9, d),
                ramp(500e-9, 200e-9, d, 0.0),
                hold(700e-9, 300e-9, 0.0),
            ]),
        ],
    };
    let times: Vec<f64> = (0..=40).map(|k| 100e-9 + 20e-9 * k as f64).collect();
    let tracks = extract_trajectories(&movie(&prog, &times), &TrackOptions::for_geometry(&g));
    let (t0, t1) = (times[0], *times.last().unwrap());
    let through: Vec<_> = tracks
        .iter()
        .filter(|t| t.points[0].t == t0 && t.points.last().unwrap().t == t1)
        .collect();
    assert_eq!(through.len(), 1, "{tracks:?}");
    let branch: Vec<_> = tracks
        .iter()
        .filter(|t| t.points.len() >= 5 && t.points[0].t > t0 && t.points.last().unwrap().t < t1)
        .collect();
    assert_eq!(branch.len(), 1, "{tracks:?}");
    // Fully split: the two spots sit 2 d L / FSR_2 apart.
    let mid = 420e-9;
    let a = through[0].points.iter().find(|p| (p.t - mid).abs() < 1e-12).unwrap();
    let b = branch[0].points.iter().find(|p| (p.t - mid).abs() < 1e-12).unwrap();
    let sep = (a.x - b.x).abs();
    let want = 2.0 * d / fsr * g.bz_extent();
    assert!((sep / want - 1.0).abs() < 0.05, "{sep:e} vs {want:e}");
}

#[test]
fn random_access_switching() {
    let g = paper();
    let loss = LossModel::default();
    let l = g.bz_extent();
    // Sites on mutual grating nulls: L/2 apart in x (N_x = 8), 4L/9 in y (N_y = 9).
    let (sx, sy) = (0.25 * l, 2.0 * l / 9.0);
    let targets = [(-sx, -sy), (sx, -sy), (sx, sy), (-sx, sy)];
    let assign = tones_for_spots(&targets, &g, false).unwrap();
    let slot = 200e-9;
    let segs = assign
        .tones
        .iter()
        .enumerate()
        .map(|(k, t)| hold(k as f64 * slot, slot, t.detuning))
        .collect();
    let prog = DriveProgram {
        channels: vec![channel(segs)],
    };
    let sites: Vec<(f64, f64)> = assign.tones.iter().map(|t| spot_position(t.detuning, &g)).collect();
    let dt = 1e-9;
    let traces: Vec<_> = sites
        .iter()
        .map(|&p| {
            pd_filter(
                &point_trace(&prog, &g, &loss, p, dt, (0.0, 4.0 * slot)).unwrap(),
                PD_BANDWIDTH,
            )
            .unwrap()
        })
        .collect();
    let w = g.spot_waists().1;
    for k in 0..4 {
        let peak = focal_intensity_analytic(&synthesize_array(&assign.tones.0[k], &g, &loss), &g, sites[k]);
        // Settled: 180 ns into the 200 ns slot.
        let idx = ((k as f64 + 0.9) * slot / dt) as usize;
        for (s, tr) in traces.iter().enumerate() {
            let rel = tr.values[idx] / peak;
            if s == k {
                assert!(rel > 0.95, "site {s} slot {k}: {rel}");
            } else {
                let (dx, dy) = (sites[s].0 - sites[k].0, sites[s].1 - sites[k].1);
                let opts = CrosstalkOptions {
                    axis: Some(dy.atan2(dx)),
                    ..CrosstalkOptions::default()
                };
                let bound = crosstalk_at_with(&g, &loss, dx.hypot(dy) / w, &opts).unwrap();
                assert!(rel < bound, "site {s} slot {k}: {rel:e} vs crosstalk {bound:e}");
            }
        }
    }
}
