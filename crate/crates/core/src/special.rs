//! Bessel functions of the first kind and Hermite polynomials.

/// J_n(x) for integer order, any real x.
///
/// Uses Miller's backward recurrence normalised by
/// J_0 + 2 sum J_2k = 1, which is stable for every order.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    if n < 0 {
        let v = bessel_j(-n, x);
        return if n % 2 == 0 { v } else { -v };
    }
    if x < 0.0 {
        let v = bessel_j(n, -x);
        return if n % 2 == 0 { v } else { -v };
    }
    if x == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let n = n as usize;
    let start = 2 * ((n.max(x as usize) + 15 + (40.0 * x).sqrt() as usize) / 2);
    let (mut jp1, mut j) = (0.0_f64, 1e-300_f64);
    let mut norm = 0.0;
    let mut result = 0.0;
    for k in (1..=start).rev() {
        let jm1 = 2.0 * k as f64 / x * j - jp1;
        jp1 = j;
        j = jm1;
        if j.abs() > 1e250 {
            j *= 1e-250;
            jp1 *= 1e-250;
            norm *= 1e-250;
            result *= 1e-250;
        }
        if (k - 1) % 2 == 0 && k > 1 {
            norm += 2.0 * j;
        }
        if k - 1 == n {
            result = j;
        }
    }
    norm += j;
    result / norm
}

/// Physicists' Hermite polynomial H_n(x).
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    match n {
        0 => h0,
        1 => h1,
        _ => {
            for k in 1..n {
                let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
                h0 = h1;
                h1 = h2;
            }
            h1
        }
    }
}

/// Normalised 1D Hermite-Gaussian amplitude H_n(sqrt2 x/w) exp(-x^2/w^2) / sqrt(2^n n!).
pub fn hermite_gauss(n: usize, x: f64, w: f64) -> f64 {
    let s = x / w;
    let norm = (2f64.powi(n as i32) * (1..=n).map(|k| k as f64).product::<f64>()).sqrt();
    hermite(n, std::f64::consts::SQRT_2 * s) * (-s * s).exp() / norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_reference_values() {
        // Abramowitz & Stegun table 9.1
        let cases = [
            (0, 1.0, 0.765_197_686_557_966_6),
            (1, 1.0, 0.440_050_585_744_933_5),
            (2, 1.0, 0.114_903_484_931_900_5),
            (0, 5.0, -0.177_596_771_314_338_3),
            (1, 5.0, -0.327_579_137_591_465_2),
            (5, 5.0, 0.261_140_546_120_170_5),
            (1, 0.3, 0.148_318_816_273_104_4),
            (10, 2.0, 2.515_386_282_716_7e-7),
        ];
        for (n, x, want) in cases {
            let got = bessel_j(n, x);
            assert!((got - want).abs() < 1e-13 * want.abs().max(1e-3), "J_{n}({x}) = {got}");
        }
    }

    #[test]
    fn bessel_symmetries() {
        assert!((bessel_j(-3, 2.0) + bessel_j(3, 2.0)).abs() < 1e-15);
        assert!((bessel_j(3, -2.0) + bessel_j(3, 2.0)).abs() < 1e-15);
        assert_eq!(bessel_j(0, 0.0), 1.0);
        let s: f64 = (-30..=30).map(|n| bessel_j(n, 7.3).powi(2)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 0.7), 1.0);
        assert_eq!(hermite(1, 0.7), 1.4);
        assert!((hermite(3, 0.5) - (8.0 * 0.125 - 12.0 * 0.5)).abs() < 1e-14);
        let u1 = hermite_gauss(1, 0.3, 1.0);
        assert!((u1 - 2.0 * 0.3 * (-0.09f64).exp()).abs() < 1e-14);
    }
}
