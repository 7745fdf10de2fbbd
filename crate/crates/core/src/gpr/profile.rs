//! Exact maximization of the two-component likelihood
//! `y ~ N(0, τ₁ G + τ₂ I)` in the eigenbasis of `G`.
//!
//! With `λ = τ₁/τ₂` the noise variance profiles out in closed form, leaving
//! a one-dimensional search over `log λ`.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileFit {
    /// `(τ₁, τ₂)`
    pub tau: [f64; 2],
    pub loglik: f64,
}

const LOG_RATIO_MIN: f64 = -40.0;
const LOG_RATIO_MAX: f64 = 40.0;
const GRID_STEP: f64 = 0.5;
const BISECTIONS: usize = 45;

/// Maximizes the log-likelihood given eigenvalues `d` of `G` (clamped at
/// zero) and rotated responses `u = Vᵀy`.
pub fn fit_vcm1_profile(d: &[f64], u: &[f64]) -> ProfileFit {
    let n = d.len() as f64;
    let ss: f64 = u.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return ProfileFit { tau: [0.0, 0.0], loglik: f64::INFINITY };
    }
    let c0 = -0.5 * n * ((2.0 * PI).ln() + 1.0);

    let sigma2_zero = ss / n;
    let mut best = ProfileFit { tau: [0.0, sigma2_zero], loglik: c0 - 0.5 * n * sigma2_zero.ln() };

    // τ₂ = 0 boundary
    if d.iter().zip(u).all(|(&di, &ui)| di > 0.0 || ui == 0.0) {
        let mut s = 0.0;
        let mut logdet = 0.0;
        let mut ok = true;
        for (&di, &ui) in d.iter().zip(u) {
            if di > 0.0 {
                s += ui * ui / di;
                logdet += di.ln();
            } else {
                ok = false;
            }
        }
        if ok {
            let tau1 = s / n;
            let ll = c0 - 0.5 * n * tau1.ln() - 0.5 * logdet;
            if ll > best.loglik {
                best = ProfileFit { tau: [tau1, 0.0], loglik: ll };
            }
        }
    }

    let slope = |t: f64| -> f64 {
        let lam = t.exp();
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (&di, &ui) in d.iter().zip(u) {
            let e = 1.0 / (lam * di + 1.0);
            let w = ui * ui * e;
            b += w;
            a += w * di * e;
            c += di * e;
        }
        n * a - b * c
    };
    let value = |t: f64| -> (f64, f64) {
        let lam = t.exp();
        let mut b = 0.0;
        let mut logdet = 0.0;
        for (&di, &ui) in d.iter().zip(u) {
            let a = lam * di + 1.0;
            b += ui * ui / a;
            logdet += a.ln();
        }
        let sigma2 = b / n;
        (c0 - 0.5 * n * sigma2.ln() - 0.5 * logdet, sigma2)
    };

    let steps = ((LOG_RATIO_MAX - LOG_RATIO_MIN) / GRID_STEP).round() as usize;
    let mut t_prev = LOG_RATIO_MIN;
    let mut g_prev = slope(t_prev);
    for k in 1..=steps {
        let t = LOG_RATIO_MIN + k as f64 * GRID_STEP;
        let g = slope(t);
        if g_prev > 0.0 && g <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t);
            for _ in 0..BISECTIONS {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t_star = 0.5 * (lo + hi);
            let (ll, sigma2) = value(t_star);
            if ll > best.loglik {
                best = ProfileFit { tau: [t_star.exp() * sigma2, sigma2], loglik: ll };
            }
        }
        t_prev = t;
        g_prev = g;
    }
    best
}

/// Log-likelihood at given `(τ₁, τ₂)` in eigen coordinates.
pub fn vcm1_loglik(d: &[f64], u: &[f64], tau: [f64; 2]) -> f64 {
    let n = d.len() as f64;
    let mut ll = -0.5 * n * (2.0 * PI).ln();
    for (&di, &ui) in d.iter().zip(u) {
        let a = tau[0] * di + tau[1];
        if a <= 0.0 {
            if ui == 0.0 {
                continue;
            }
            return f64::NEG_INFINITY;
        }
        ll -= 0.5 * (a.ln() + ui * ui / a);
    }
    ll
}
