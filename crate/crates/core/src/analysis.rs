//! Figures of merit: crosstalk, power-law tails, spot uniformity, grid
//! geometry, efficiency budget and the efficiency/linewidth tradeoff.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{spot_position, synthesize_array, ToneSet};
use crate::config::{LossModel, RipaGeometry};
use crate::error::{Error, Result};
use crate::fit::fit_gaussian_1d;
use crate::focal::{axis_sum, fit_spot, AnalyticFocal, FocalWindow, SpotFit};

/// How the detector site collects light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrosstalkWeight {
    /// exp(-2 r^2 / w'^2), truncated at 3 w'.
    Gaussian,
    /// Uniform disk of radius w'.
    HardDisk,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrosstalkOptions {
    pub n_azimuth: usize,
    /// Weight grid samples per axis, spanning +/- 3 w'.
    pub grid: usize,
    pub weight: CrosstalkWeight,
    /// Angle of the first azimuth sample.
    pub azimuth_offset: f64,
    /// Evaluate along one direction instead of averaging over azimuth.
    pub axis: Option<f64>,
}

impl Default for CrosstalkOptions {
    fn default() -> Self {
        Self {
            n_azimuth: 64,
            grid: 41,
            weight: CrosstalkWeight::Gaussian,
            azimuth_offset: 0.0,
            axis: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkCurve {
    /// (d / w0', value) pairs with strictly increasing separation.
    pub points: Vec<(f64, f64)>,
    pub spot_waist: f64,
    pub weight: CrosstalkWeight,
    pub geometry: RipaGeometry,
    pub loss: LossModel,
}

struct CrosstalkKernel<'a> {
    focal: AnalyticFocal<'a>,
    weights: Vec<(f64, f64, f64)>,
    norm: f64,
    waist: f64,
}

impl<'a> CrosstalkKernel<'a> {
    fn new(arr: &'a crate::array::ArrayField, geom: &RipaGeometry, opts: &CrosstalkOptions) -> Result<Self> {
        if opts.grid < 3 {
            return Err(Error::Argument("crosstalk weight grid needs at least 3 samples".into()));
        }
        let waist = geom.spot_waists().1;
        let focal = AnalyticFocal::new(arr, geom);
        let half = match opts.weight {
            CrosstalkWeight::Gaussian => 3.0 * waist,
            CrosstalkWeight::HardDisk => waist,
        };
        let h = 2.0 * half / (opts.grid - 1) as f64;
        let mut weights = Vec::new();
        for a in 0..opts.grid {
            for b in 0..opts.grid {
                let (x, y) = (-half + a as f64 * h, -half + b as f64 * h);
                let rr = x * x + y * y;
                let w = match opts.weight {
                    CrosstalkWeight::Gaussian if rr <= 9.0 * waist * waist => (-2.0 * rr / (waist * waist)).exp(),
                    CrosstalkWeight::HardDisk if rr <= waist * waist => 1.0,
                    _ => 0.0,
                };
                if w > 0.0 {
                    weights.push((x, y, w));
                }
            }
        }
        let mut k = Self {
            focal,
            weights,
            norm: 1.0,
            waist,
        };
        k.norm = k.collect((0.0, 0.0));
        if !(k.norm > 0.0) {
            return Err(Error::Argument("addressed spot carries no power".into()));
        }
        Ok(k)
    }

    fn collect(&self, c: (f64, f64)) -> f64 {
        self.weights
            .iter()
            .map(|&(x, y, w)| w * self.focal.intensity(c.0 + x, c.1 + y))
            .sum::<f64>()
            / self.norm
    }

    fn value(&self, separation: f64, opts: &CrosstalkOptions) -> f64 {
        let d = separation * self.waist;
        match opts.axis {
            Some(a) => self.collect((d * a.cos(), d * a.sin())),
            None => {
                let vals: Vec<f64> = (0..opts.n_azimuth)
                    .into_par_iter()
                    .map(|k| {
                        let a = opts.azimuth_offset + TAU * k as f64 / opts.n_azimuth as f64;
                        self.collect((d * a.cos(), d * a.sin()))
                    })
                    .collect();
                vals.iter().sum::<f64>() / opts.n_azimuth as f64
            }
        }
    }
}

fn check_crosstalk_args(separation: f64, opts: &CrosstalkOptions) -> Result<()> {
    if !(separation > 0.0) {
        return Err(Error::Argument(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if opts.axis.is_none() && opts.n_azimuth < 8 {
        return Err(Error::Argument("need at least 8 azimuth samples".into()));
    }
    Ok(())
}

/// Power the zero-detuning spot deposits at a site `separation` spot waists
/// away, relative to the power it deposits on itself, averaged over azimuth.
pub fn crosstalk_at(geom: &RipaGeometry, loss: &LossModel, separation: f64, n_azimuth: usize) -> Result<f64> {
    crosstalk_at_with(
        geom,
        loss,
        separation,
        &CrosstalkOptions {
            n_azimuth,
            ..CrosstalkOptions::default()
        },
    )
}

pub fn crosstalk_at_with(
    geom: &RipaGeometry,
    loss: &LossModel,
    separation: f64,
    opts: &CrosstalkOptions,
) -> Result<f64> {
    check_crosstalk_args(separation, opts)?;
    let arr = synthesize_array(&crate::array::Tone::at(0.0), geom, loss);
    Ok(CrosstalkKernel::new(&arr, geom, opts)?.value(separation, opts))
}

pub fn crosstalk_curve(
    geom: &RipaGeometry,
    loss: &LossModel,
    separations: &[f64],
    opts: &CrosstalkOptions,
) -> Result<CrosstalkCurve> {
    if separations.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("separations must increase strictly".into()));
    }
    for &s in separations {
        check_crosstalk_args(s, opts)?;
    }
    let arr = synthesize_array(&crate::array::Tone::at(0.0), geom, loss);
    let kernel = CrosstalkKernel::new(&arr, geom, opts)?;
    Ok(CrosstalkCurve {
        points: separations.iter().map(|&s| (s, kernel.value(s, opts))).collect(),
        spot_waist: kernel.waist,
        weight: opts.weight,
        geometry: geom.clone(),
        loss: loss.clone(),
    })
}

/// Evenly spaced separations from `lo` to `hi` inclusive.
pub fn separation_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    /// RMS residual in natural-log units.
    pub rms: f64,
    /// Set when the residual shows the data is not a power law.
    pub mismatch: bool,
}

/// Residual above which a log-log fit is reported as a model mismatch.
pub const POWERLAW_MISMATCH_RMS: f64 = 0.1;

/// Least-squares line through (ln d, ln c) for points with d in `tail_range`.
pub fn powerlaw_fit(points: &[(f64, f64)], tail_range: (f64, f64)) -> Result<PowerLawFit> {
    let sel: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.0 >= tail_range.0 && p.0 <= tail_range.1)
        .copied()
        .collect();
    if sel.len() < 5 {
        return Err(Error::Argument(format!(
            "{} points in the tail range, need 5",
            sel.len()
        )));
    }
    if let Some(p) = sel.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(Error::Domain(format!(
            "nonpositive point ({}, {}) in log-log fit",
            p.0, p.1
        )));
    }
    let xs: Vec<f64> = sel.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = sel.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - icpt - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PowerLawFit {
        exponent: slope,
        prefactor: icpt.exp(),
        rms,
        mismatch: rms > POWERLAW_MISMATCH_RMS,
    })
}

/// Relative (population) standard deviations of spot peak and waists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uniformity {
    pub sigma_i: f64,
    pub sigma_wx: f64,
    pub sigma_wy: f64,
}

pub fn uniformity_stats(fits: &[SpotFit]) -> Result<Uniformity> {
    if fits.len() < 2 {
        return Err(Error::Argument("need at least two spot fits".into()));
    }
    let rel = |f: fn(&SpotFit) -> f64| {
        let n = fits.len() as f64;
        let mean = fits.iter().map(f).sum::<f64>() / n;
        let var = fits.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    };
    Ok(Uniformity {
        sigma_i: rel(|s| s.peak),
        sigma_wx: rel(|s| s.w_x),
        sigma_wy: rel(|s| s.w_y),
    })
}

/// Fits every tone's spot in isolation, each on a window centred on its
/// predicted position with pitch w'/8.
pub fn fit_tone_spots(tones: &ToneSet, geom: &RipaGeometry, loss: &LossModel) -> Result<Vec<SpotFit>> {
    let w = geom.spot_waists().1;
    let radius = 1.5 * w;
    let n = 2 * (radius / (w / 8.0)).ceil() as usize + 1;
    tones
        .0
        .par_iter()
        .map(|t| {
            let center = spot_position(t.detuning, geom);
            let arr = synthesize_array(t, geom, loss);
            let win = FocalWindow::new(center, w / 8.0, n);
            let grid = AnalyticFocal::new(&arr, geom).sample(&win).intensity();
            fit_spot(&grid, center, radius)
        })
        .collect()
}

/// Measured lattice of an `n x n` grid ordered `k = i * n + j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    /// Mean spacing between neighbours along j.
    pub d_x: f64,
    /// Mean spacing between neighbours along i.
    pub d_y: f64,
    /// Mean angle between the two lattice directions.
    pub angle: f64,
}

pub fn grid_metrics(centers: &[(f64, f64)], n: usize, geom: &RipaGeometry) -> Result<GridMetrics> {
    if n < 2 || centers.len() != n * n {
        return Err(Error::Shape(format!(
            "{} centres do not form a {n} x {n} grid",
            centers.len()
        )));
    }
    let l = geom.bz_extent();
    let wrap = |d: f64| d - l * (d / l).round();
    let diff = |a: usize, b: usize| (wrap(centers[b].0 - centers[a].0), wrap(centers[b].1 - centers[a].1));
    let (mut vj, mut vi) = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
    let mut angle = 0.0;
    let mut count_angle = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            if j + 1 < n {
                let d = diff(k, k + 1);
                vj = (vj.0 + d.0.hypot(d.1), vj.1 + 1.0, 0.0);
            }
            if i + 1 < n {
                let d = diff(k, k + n);
                vi = (vi.0 + d.0.hypot(d.1), vi.1 + 1.0, 0.0);
            }
            if i + 1 < n && j + 1 < n {
                let a = diff(k, k + 1);
                let b = diff(k, k + n);
                let cos = (a.0 * b.0 + a.1 * b.1) / (a.0.hypot(a.1) * b.0.hypot(b.1));
                angle += cos.clamp(-1.0, 1.0).acos();
                count_angle += 1.0;
            }
        }
    }
    Ok(GridMetrics {
        d_x: vj.0 / vj.1,
        d_y: vi.0 / vi.1,
        angle: angle / count_angle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyBudget {
    pub a_1: f64,
    pub kappa_1: f64,
    pub loss_1: f64,
    pub eta_1: f64,
    pub eta_rel: f64,
    pub a_2: f64,
    pub kappa_lock: f64,
    pub kappa_2: f64,
    pub loss_2: f64,
    pub eta_2: f64,
    pub eta_im: f64,
    pub eta_total: f64,
}

/// One printable line of the budget table; values in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub quantity: String,
    pub symbol: String,
    pub value_percent: f64,
}

fn stage_efficiency(kappa: f64, total: f64, n: usize) -> f64 {
    (0..n).map(|k| kappa * (1.0 - total).powi(k as i32)).sum()
}

pub fn efficiency_budget(loss: &LossModel, geom: &RipaGeometry) -> EfficiencyBudget {
    let a_1 = loss.stage1_total();
    let a_2 = loss.stage2_total();
    let eta_1 = stage_efficiency(loss.kappa_1, a_1, geom.n_rows);
    let eta_2 = stage_efficiency(loss.kappa_2, a_2, geom.n_cols);
    EfficiencyBudget {
        a_1,
        kappa_1: loss.kappa_1,
        loss_1: loss.loss_1,
        eta_1,
        eta_rel: loss.relay_eff,
        a_2,
        kappa_lock: loss.kappa_lock,
        kappa_2: loss.kappa_2,
        loss_2: loss.loss_2,
        eta_2,
        eta_im: loss.imaging_eff,
        eta_total: eta_1 * loss.relay_eff * eta_2 * loss.imaging_eff,
    }
}

impl EfficiencyBudget {
    pub fn rows(&self) -> Vec<BudgetRow> {
        let row = |q: &str, s: &str, v: f64| BudgetRow {
            quantity: q.into(),
            symbol: s.into(),
            value_percent: 100.0 * v,
        };
        vec![
            row("1st RIPA round-trip loss", "A_1", self.a_1),
            row("Out-coupling", "kappa_1", self.kappa_1),
            row("Internal loss", "l_1", self.loss_1),
            row("1st RIPA efficiency", "eta_1", self.eta_1),
            row("Relay system efficiency", "eta_rel", self.eta_rel),
            row("2nd RIPA round-trip loss", "A_2", self.a_2),
            row("Locking path", "kappa_2_lock", self.kappa_lock),
            row("Out-coupling", "kappa_2", self.kappa_2),
            row("Internal loss", "l_2", self.loss_2),
            row("2nd RIPA efficiency", "eta_2", self.eta_2),
            row("SLM + imaging efficiency", "eta_im", self.eta_im),
            row("Total system efficiency", "eta", self.eta_total),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub kappa: f64,
    pub efficiency: f64,
    /// Fitted waist relative to the uniform-array waist.
    pub broadening: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub n: usize,
    pub internal_loss: f64,
    pub points: Vec<TradeoffPoint>,
    /// The experimental out-coupling ratios evaluated on this curve.
    pub markers: Vec<TradeoffPoint>,
}

/// Out-coupling ratios of the two stages of the built device.
pub const OPERATING_KAPPAS: [f64; 2] = [0.029, 0.068];

impl TradeoffCurve {
    /// Most efficient point whose broadening stays below `max_rw`.
    pub fn best_within(&self, max_rw: f64) -> Option<TradeoffPoint> {
        self.points
            .iter()
            .filter(|p| p.broadening < max_rw)
            .max_by(|a, b| a.efficiency.total_cmp(&b.efficiency))
            .copied()
    }
}

/// Fitted 1/e^2 waist (in zone units) of the n-beam interference peak with
/// per-beam field ratio `r`.
fn peak_waist(n: usize, r: f64) -> Result<f64> {
    let w_ref = (6.0 / (PI * PI * ((n * n) as f64 - 1.0))).sqrt();
    let span = 12.0 * w_ref;
    let m = 4001;
    let u: Vec<f64> = (0..m).map(|k| -span + 2.0 * span * k as f64 / (m - 1) as f64).collect();
    let i: Vec<f64> = u.iter().map(|&u| axis_sum(n, r, TAU * u).norm_sqr()).collect();
    Ok(fit_gaussian_1d(&u, &i, (-2.0f64).exp())?.waist)
}

/// Efficiency and linewidth broadening at one out-coupling ratio.
pub fn tradeoff_point(n: usize, internal_loss: f64, kappa: f64) -> Result<TradeoffPoint> {
    if n < 2 {
        return Err(Error::Argument("need at least two beams".into()));
    }
    let a = kappa + internal_loss;
    if !(kappa >= 0.0 && internal_loss >= 0.0) || a >= 1.0 {
        return Err(Error::Domain(format!("kappa + l = {a} must lie in [0, 1)")));
    }
    let w = peak_waist(n, (1.0 - a).sqrt())?;
    let w0 = peak_waist(n, 1.0)?;
    Ok(TradeoffPoint {
        kappa,
        efficiency: stage_efficiency(kappa, a, n),
        broadening: w / w0,
    })
}

pub fn tradeoff_curve(n: usize, internal_loss: f64, kappas: &[f64]) -> Result<TradeoffCurve> {
    let points = kappas
        .par_iter()
        .map(|&k| tradeoff_point(n, internal_loss, k))
        .collect::<Result<Vec<_>>>()?;
    let markers = OPERATING_KAPPAS
        .iter()
        .filter(|&&k| k + internal_loss < 1.0)
        .map(|&k| tradeoff_point(n, internal_loss, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffCurve {
        n,
        internal_loss,
        points,
        markers,
    })
}

/// Logarithmically spaced out-coupling ratios in [lo, hi].
pub fn kappa_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}
