//! Gamma, beta, chi-square and F distribution functions.

use crate::error::{PptError, Result};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const TINY: f64 = 1e-300;

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

pub fn chi2_cdf(df: f64, x: f64) -> f64 {
    gamma_p(0.5 * df, 0.5 * x)
}

/// Upper tail `1 − F(x)` computed without cancellation.
pub fn chi2_sf(df: f64, x: f64) -> f64 {
    gamma_q(0.5 * df, 0.5 * x)
}

fn chi2_pdf(df: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * df;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Quantile of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_quantile(df: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PptError::invalid(format!("probability {p} outside (0, 1)")));
    }
    if !(df > 0.0) {
        return Err(PptError::invalid(format!("degrees of freedom {df} must be positive")));
    }
    let upper = p > 0.5;
    // residual is increasing in x in both branches
    let residual = |x: f64| if upper { (1.0 - p) - chi2_sf(df, x) } else { chi2_cdf(df, x) - p };

    let z = normal_quantile(p);
    let h = 2.0 / (9.0 * df);
    let mut x = (df * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    if x <= lo || x >= hi {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..300 {
        let r = residual(x);
        if r == 0.0 {
            return Ok(x);
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_pdf(df, x);
        let mut next = if dens > 0.0 { x - r / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Standard normal quantile (Acklam's rational approximation with one
/// Halley refinement step).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let plow = 0.02425;
    let x = if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

pub fn normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * gamma_q(0.5, 0.5 * x * x)
    } else {
        0.5 + 0.5 * gamma_p(0.5, 0.5 * x * x)
    }
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(d1: f64, d2: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    beta_inc(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2))
}

/// Upper tail of the F distribution.
pub fn f_sf(d1: f64, d2: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    beta_inc(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};

    #[test]
    fn chi2_quantile_examples() {
        let q = chi2_quantile(2.0, 0.95).unwrap();
        assert!((q + 2.0 * 0.05f64.ln()).abs() < 1e-10);
        assert!((chi2_quantile(1.0, 0.95).unwrap() - 3.841_458_820_694_124).abs() < 1e-8);
        assert!((chi2_quantile(10.0, 0.5).unwrap() - 9.341_817_765_591_96).abs() < 1e-8);
        assert!(chi2_quantile(3.0, 1.0).is_err());
        assert!(chi2_quantile(3.0, 0.0).is_err());
    }

    #[test]
    fn chi2_matches_statrs() {
        for df in [1.0, 2.0, 5.0, 17.0, 100.0, 1000.0] {
            let d = ChiSquared::new(df).unwrap();
            for x in [0.01, 0.5, 1.0, 3.0, df, 2.0 * df, 5.0 * df] {
                assert!((chi2_cdf(df, x) - d.cdf(x)).abs() < 1e-12, "df {df} x {x}");
            }
        }
    }

    #[test]
    fn chi2_quantile_far_tail() {
        for df in [1.0, 10.0, 200.0, 2000.0] {
            let p = 1.0 - 5e-6;
            let q = chi2_quantile(df, p).unwrap();
            assert!((chi2_sf(df, q) - 5e-6).abs() < 1e-10 * 5e-6 + 1e-16, "df {df}");
        }
    }

    #[test]
    fn chi2_round_trip_grid() {
        for df in 1..=50 {
            let mut p = 0.001;
            while p < 0.9995 {
                let q = chi2_quantile(df as f64, p).unwrap();
                assert!((chi2_cdf(df as f64, q) - p).abs() < 1e-10, "df {df} p {p}");
                p += 0.0415;
            }
            let q = chi2_quantile(df as f64, 0.999).unwrap();
            assert!((chi2_cdf(df as f64, q) - 0.999).abs() < 1e-10);
        }
    }

    #[test]
    fn f_cdf_examples() {
        assert!((f_cdf(1.0, 1.0, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(f_cdf(3.0, 54.0, 0.0), 0.0);
        let d = FisherSnedecor::new(3.0, 54.0).unwrap();
        for x in [0.1, 0.7, 2.0, 4.5, 10.0] {
            assert!((f_cdf(3.0, 54.0, x) - d.cdf(x)).abs() < 1e-12);
            assert!((f_sf(3.0, 54.0, x) - (1.0 - d.cdf(x))).abs() < 1e-12);
        }
    }

    #[test]
    fn f_cdf_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{ChiSquared as Chi, Distribution};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a = Chi::new(3.0).unwrap();
        let b = Chi::new(54.0).unwrap();
        let draws = 1_000_000;
        let hits = (0..draws)
            .filter(|_| (a.sample(&mut rng) / 3.0) / (b.sample(&mut rng) / 54.0) <= 2.0)
            .count();
        assert!((hits as f64 / draws as f64 - f_cdf(3.0, 54.0, 2.0)).abs() < 5e-3);
    }

    #[test]
    fn ln_gamma_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-14);
        assert!((ln_gamma(101.0) - 363.739_375_555_563_5).abs() < 1e-10);
    }

    #[test]
    fn normal_quantile_round_trip() {
        for p in [1e-8, 0.01, 0.3, 0.5, 0.9, 0.999_999] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-12 * p.max(1e-3));
        }
    }
}
