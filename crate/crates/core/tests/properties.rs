use std::f64::consts::{PI, TAU};

use proptest::prelude::*;
use ripa_core::analysis::{efficiency_budget, tradeoff_point};
use ripa_core::array::{spot_position, synthesize_array, Tone, ToneSet};
use ripa_core::calibration::solve_affine;
use ripa_core::config::{LossModel, RipaGeometry};
use ripa_core::drive::{placement_error, tones_for_spots};
use ripa_core::focal::{axis_sum, focal_intensity_analytic, grating_factor};
use ripa_core::time::{point_trace, DriveProgram};
use ripa_core::wrap_phase;

fn paper() -> RipaGeometry {
    RipaGeometry::default()
}

fn loss_model() -> impl Strategy<Value = LossModel> {
    (0.001..0.2f64, 0.0..0.1f64, 0.001..0.2f64, 0.0..0.1f64, 0.0..0.2f64).prop_map(|(k1, l1, k2, l2, kl)| LossModel {
        kappa_1: k1,
        loss_1: l1,
        kappa_2: k2,
        loss_2: l2,
        kappa_lock: kl,
        ..LossModel::default()
    })
}

proptest! {
    #[test]
    fn wrap_is_half_open_and_congruent(phi in -1e3..1e3f64) {
        let w = wrap_phase(phi);
        prop_assert!((-PI..PI).contains(&w));
        let k = ((phi - w) / TAU).round();
        prop_assert!((phi - w - k * TAU).abs() < 1e-9);
    }

    #[test]
    fn axis_sum_is_the_direct_sum(n in 1usize..40, r in 0.5..1.0f64, theta in -10.0..10.0f64) {
        let direct: num_complex::Complex64 = (0..n)
            .map(|k| num_complex::Complex64::from_polar(r.powi(k as i32), k as f64 * theta))
            .sum();
        let s = axis_sum(n, r, theta);
        prop_assert!((s - direct).norm() <= 1e-9 * (n as f64));
    }

    #[test]
    fn grating_factor_is_bounded_and_periodic(n in 1usize..60, u in -3.0..3.0f64) {
        let g = grating_factor(n, u);
        prop_assert!(g >= 0.0 && g <= (n * n) as f64 * (1.0 + 1e-9));
        prop_assert!((grating_factor(n, u + 1.0) - g).abs() <= 1e-6 * (n * n) as f64);
    }

    #[test]
    fn intensity_scales_with_drive_power(nu in -1.5e9..1.5e9f64, k in 0.1..5.0f64, x in -7e-5..7e-5f64, y in -7e-5..7e-5f64) {
        let g = paper();
        let loss = LossModel::default();
        let a = focal_intensity_analytic(&synthesize_array(&Tone::new(nu, 1.0, 0.0), &g, &loss), &g, (x, y));
        let b = focal_intensity_analytic(&synthesize_array(&Tone::new(nu, k, 0.0), &g, &loss), &g, (x, y));
        prop_assert!((b - k * k * a).abs() <= 1e-9 * b.max(1e-300));
    }

    #[test]
    fn fsr2_step_moves_one_raster_line(nu in -1.4e9..1.4e9f64) {
        let g = paper();
        let l = g.bz_extent();
        let (a, b) = (spot_position(nu, &g), spot_position(nu + g.fsr_2(), &g));
        let d = |p: f64, q: f64| wrap_phase(TAU * (p - q) / l) * l / TAU;
        prop_assert!(d(b.0, a.0).abs() < 1e-12);
        prop_assert!((d(b.1, a.1) - l / g.length_ratio()).abs() < 1e-12);
    }

    #[test]
    fn budget_is_a_product_of_fractions(loss in loss_model()) {
        let g = paper();
        let b = efficiency_budget(&loss, &g);
        for v in [b.eta_1, b.eta_2, b.eta_total] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((b.eta_total - b.eta_1 * b.eta_rel * b.eta_2 * b.eta_im).abs() < 1e-15);
        let worse = LossModel { loss_1: loss.loss_1 + 0.01, loss_2: loss.loss_2 + 0.01, ..loss.clone() };
        prop_assert!(efficiency_budget(&worse, &g).eta_total < b.eta_total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tradeoff_is_monotonic_in_outcoupling(n in 10usize..120, l in 0.0..0.03f64, k in 0.002..0.2f64, dk in 0.005..0.1f64) {
        let a = tradeoff_point(n, l, k).unwrap();
        let b = tradeoff_point(n, l, k + dk).unwrap();
        prop_assert!(b.efficiency > a.efficiency);
        prop_assert!(b.broadening >= a.broadening - 1e-9);
        prop_assert!(a.broadening >= 1.0 - 1e-9);
    }

    #[test]
    fn tone_round_trip_lands_within_half_a_channel(nu in -1.59e9..1.59e9f64) {
        let g = paper();
        let target = spot_position(nu, &g);
        let f_res = g.fsr_2() / g.n_cols as f64;
        let (p0, p1) = (spot_position(0.0, &g), spot_position(f_res, &g));
        let half_channel = 0.5 * (p1.0 - p0.0).hypot(p1.1 - p0.1);
        let exact = tones_for_spots(&[target], &g, false).unwrap();
        prop_assert!(exact.placement_errors[0] < 1e-9, "{}", exact.placement_errors[0]);
        let snapped = tones_for_spots(&[target], &g, true).unwrap();
        let err = placement_error(target, snapped.tones.0[0].detuning, &g);
        prop_assert!(err <= half_channel * (1.0 + 1e-9), "{err:e} vs {half_channel:e}");
    }

    #[test]
    fn steady_state_matches_static_solver(nu in -1.5e9..1.5e9f64, x in -7e-5..7e-5f64, y in -7e-5..7e-5f64) {
        let g = paper();
        let loss = LossModel::default();
        let tones = ToneSet(vec![Tone::at(nu)]);
        let prog = DriveProgram::static_tones(&tones, 0.0, 1e-6);
        let tr = point_trace(&prog, &g, &loss, (x, y), 1e-9, (500e-9, 510e-9)).unwrap();
        let arr = synthesize_array(&tones.0[0], &g, &loss);
        let want = focal_intensity_analytic(&arr, &g, (x, y));
        // Near grating nulls compare against a floor tied to the spot peak.
        let floor = 1e-9 * focal_intensity_analytic(&arr, &g, spot_position(nu, &g));
        for v in &tr.values {
            prop_assert!((v - want).abs() <= 1e-6 * want.max(floor));
        }
    }

    #[test]
    fn three_anchors_interpolate_exactly(
        m in prop::array::uniform4(-50.0..50.0f64),
        o in prop::array::uniform2(-500.0..500.0f64),
        a in (0usize..8, 0usize..9), b in (0usize..8, 0usize..9), c in (0usize..8, 0usize..9),
    ) {
        let cross = (b.0 as f64 - a.0 as f64) * (c.1 as f64 - a.1 as f64) - (b.1 as f64 - a.1 as f64) * (c.0 as f64 - a.0 as f64);
        prop_assume!(cross.abs() > 0.5);
        prop_assume!((m[0] * m[3] - m[1] * m[2]).abs() > 1.0);
        let map = |(i, j): (usize, usize)| (m[0] * i as f64 + m[1] * j as f64 + o[0], m[2] * i as f64 + m[3] * j as f64 + o[1]);
        let fit = solve_affine(&[(a, map(a)), (b, map(b)), (c, map(c))]).unwrap();
        prop_assert!(fit.residual < 1e-8);
        let (p, q) = fit.apply((4.0, 5.0));
        let (tp, tq) = map((4, 5));
        prop_assert!((p - tp).abs() < 1e-7 && (q - tq).abs() < 1e-7);
    }
}
