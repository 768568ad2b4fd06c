//! Levenberg-Marquardt least squares and the model fits built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative cost decrease falls below this.
    pub ftol: f64,
    /// Stop when the relative parameter step falls below this.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-15,
            xtol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
}

/// Minimise sum r_k(p)^2. `residuals` writes one value per data point.
///
/// The Jacobian comes from central differences, so parameters should be
/// scaled to order one by the caller.
pub fn levenberg_marquardt<F>(residuals: F, p0: &[f64], n_data: usize, opts: &LmOptions) -> Result<LmResult>
where
    F: Fn(&[f64], &mut [f64]),
{
    let np = p0.len();
    if n_data < np {
        return Err(Error::Argument(format!(
            "{n_data} data points cannot determine {np} parameters"
        )));
    }
    let mut p = p0.to_vec();
    let mut r = vec![0.0; n_data];
    residuals(&p, &mut r);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    if !cost.is_finite() {
        return Err(Error::FitDiverged {
            iterations: 0,
            residual: cost,
        });
    }
    let mut lambda = 1e-3;
    let mut jac = DMatrix::<f64>::zeros(n_data, np);
    let mut rp = vec![0.0; n_data];
    let mut rm = vec![0.0; n_data];
    let mut trial = vec![0.0; n_data];

    for iter in 1..=opts.max_iter {
        for k in 0..np {
            let h = 1e-6 * p[k].abs().max(1.0);
            let mut q = p.clone();
            q[k] = p[k] + h;
            residuals(&q, &mut rp);
            q[k] = p[k] - h;
            residuals(&q, &mut rm);
            for i in 0..n_data {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * rv;

        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let q: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            residuals(&q, &mut trial);
            let c: f64 = trial.iter().map(|v| v * v).sum();
            if c.is_finite() && c <= cost {
                let dp = step.norm() / (DVector::from_column_slice(&p).norm() + 1e-12);
                let dc = (cost - c) / cost.max(1e-300);
                p = q;
                std::mem::swap(&mut r, &mut trial);
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if dp < opts.xtol || dc < opts.ftol {
                    return Ok(LmResult {
                        params: p,
                        cost,
                        iterations: iter,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: already at the minimum.
            return Ok(LmResult {
                params: p,
                cost,
                iterations: iter,
            });
        }
    }
    Err(Error::FitDiverged {
        iterations: opts.max_iter,
        residual: cost.sqrt(),
    })
}

/// Fitted 1D Gaussian `a exp(-2 (x - x0)^2 / w^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gauss1d {
    pub amplitude: f64,
    pub center: f64,
    pub waist: f64,
}

/// Fit a 1D Gaussian to the samples that exceed `core_fraction` of the maximum.
pub fn fit_gaussian_1d(x: &[f64], y: &[f64], core_fraction: f64) -> Result<Gauss1d> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Argument("need at least 3 matching samples".into()));
    }
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(_, &v)| v >= core_fraction * ymax)
        .map(|(a, b)| (*a, *b))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::Argument("core region has fewer than 3 samples".into()));
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = ((hi - lo) / 2.0).max(f64::MIN_POSITIVE);
    let x0 = x[imax];
    let p0 = [1.0, 0.0, 1.0];
    let res = levenberg_marquardt(
        |p, out| {
            for ((o, &xv), &yv) in out.iter_mut().zip(&xs).zip(&ys) {
                let u = (xv - x0) / scale - p[1];
                *o = p[0] * (-2.0 * u * u / (p[2] * p[2])).exp() - yv / ymax;
            }
        },
        &p0,
        xs.len(),
        &LmOptions::default(),
    )?;
    Ok(Gauss1d {
        amplitude: res.params[0] * ymax,
        center: x0 + res.params[1] * scale,
        waist: res.params[2].abs() * scale,
    })
}
