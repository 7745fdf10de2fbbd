//! Variance-component models `y ~ N(0, Σ_j τ_j G_j)`: likelihood, EM and
//! Fisher scoring.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PptError, Result};
use crate::gpr::profile::{fit_vcm1_profile, vcm1_loglik};
use crate::numerics::eigen::{raw_eigen, RANK_TOL};
use crate::numerics::qp::{solve_nonneg_qp, QpProblem};

pub const EM_TOL: f64 = 1e-8;
pub const EM_MAX_ITER: usize = 5000;
pub const NEWTON_MAX_ITER: usize = 100;
pub const NEWTON_WARMUP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VcmStructure {
    Vcm1,
    Vcm2,
}

#[derive(Debug, Clone)]
pub struct VcmSpec {
    pub components: Vec<DMatrix<f64>>,
    pub structure: VcmStructure,
    ranks: Vec<usize>,
}

impl VcmSpec {
    /// `τ₁ G₁ + τ₂ I`
    pub fn vcm1(g1: DMatrix<f64>) -> Result<Self> {
        let n = g1.nrows();
        Self::build(vec![g1, DMatrix::identity(n, n)], VcmStructure::Vcm1)
    }

    pub fn vcm2(components: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::build(components, VcmStructure::Vcm2)
    }

    fn build(components: Vec<DMatrix<f64>>, structure: VcmStructure) -> Result<Self> {
        let n = components.first().map_or(0, |g| g.nrows());
        if components.is_empty() || components.iter().any(|g| g.shape() != (n, n)) {
            return Err(PptError::Dimension("variance components must be square and equal-sized".into()));
        }
        let mut ranks = Vec::with_capacity(components.len());
        for g in &components {
            crate::numerics::eigen::check_symmetric(g)?;
            let ev = g.clone().symmetric_eigenvalues();
            let top = ev.max();
            if ev.min() < -1e-8 * top.max(0.0) {
                return Err(PptError::NotPsd { min: ev.min(), max: top });
            }
            ranks.push(if top > 0.0 { ev.iter().filter(|&&c| c > RANK_TOL * top).count() } else { 0 });
        }
        Ok(VcmSpec { components, structure, ranks })
    }

    pub fn n(&self) -> usize {
        self.components[0].nrows()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Numerical rank of each component.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn covariance(&self, tau2: &[f64]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n(), self.n());
        for (g, &t) in self.components.iter().zip(tau2) {
            s += g * t;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Em,
    NewtonFisher,
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcmFit {
    pub tau2: Vec<f64>,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub method: FitMethod,
    /// Set when Fisher scoring failed and the EM solution was returned.
    #[serde(default)]
    pub fell_back: bool,
}

impl VcmFit {
    fn degenerate(j: usize, method: FitMethod) -> Self {
        VcmFit {
            tau2: vec![0.0; j],
            loglik: f64::INFINITY,
            trace: vec![],
            iterations: 0,
            converged: true,
            method,
            fell_back: false,
        }
    }
}

struct Factored {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    loglik: f64,
}

fn factor(sigma: DMatrix<f64>, y: &DVector<f64>) -> Result<Factored> {
    let n = y.len() as f64;
    let chol = sigma.cholesky().ok_or(PptError::SingularCovariance)?;
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    let loglik = -0.5 * (n * (2.0 * PI).ln() + logdet + y.dot(&alpha));
    if !loglik.is_finite() {
        return Err(PptError::SingularCovariance);
    }
    Ok(Factored { chol, alpha, loglik })
}

/// Gaussian log-density of `y` under `N(0, Σ_j τ_j G_j)`.
pub fn marginal_loglik(spec: &VcmSpec, tau2: &[f64], y: &DVector<f64>) -> Result<f64> {
    if tau2.len() != spec.n_components() || y.len() != spec.n() {
        return Err(PptError::Dimension("τ² or y length does not match the model".into()));
    }
    Ok(factor(spec.covariance(tau2), y)?.loglik)
}

fn initial_tau(y: &DVector<f64>, j: usize) -> Vec<f64> {
    let (_, sd) = crate::data::mean_sd(y.iter().copied());
    let v = if sd.is_finite() && sd > 0.0 { sd * sd } else { y.norm_squared() / y.len() as f64 };
    vec![v / j as f64; j]
}

/// EM for `τ₁ G₁ + τ₂ I` after a single eigendecomposition of `G₁`.
///
/// Rank-deficient `G₁` uses the pseudo-inverse on its range, and the `τ₁`
/// update divides by the rank of `G₁` instead of `n`.
pub fn fit_vcm1_em(g1: &DMatrix<f64>, y: &DVector<f64>, tol: f64, max_iter: usize) -> Result<VcmFit> {
    crate::numerics::eigen::check_symmetric(g1)?;
    if g1.nrows() != y.len() {
        return Err(PptError::Dimension("G₁ and y sizes differ".into()));
    }
    let (v, c) = raw_eigen(g1)?;
    let top = c.max().max(0.0);
    let d: Vec<f64> = c.iter().map(|&ci| if ci > RANK_TOL * top { ci } else { 0.0 }).collect();
    let u = v.tr_mul(y);
    Ok(vcm1_em_eigen(&d, u.as_slice(), None, tol, max_iter))
}

/// EM iteration in eigen coordinates.
pub fn vcm1_em_eigen(d: &[f64], u: &[f64], start: Option<[f64; 2]>, tol: f64, max_iter: usize) -> VcmFit {
    let n = d.len();
    let ss: f64 = u.iter().map(|x| x * x).sum();
    if ss == 0.0 {
        return VcmFit::degenerate(2, FitMethod::Em);
    }
    let rank = d.iter().filter(|&&di| di > 0.0).count();
    let mut tau = start.unwrap_or_else(|| {
        let y = DVector::from_column_slice(u);
        let t = initial_tau(&y, 2);
        [t[0], t[1]]
    });
    let mut ll = vcm1_loglik(d, u, tau);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (t1, t2) = (tau[0], tau[1]);
        let (mut s1, mut s2) = (0.0, 0.0);
        for (&di, &ui) in d.iter().zip(u) {
            let a = t1 * di + t2;
            let r = ui / a;
            if di > 0.0 {
                s1 += t1 * t2 / a + t1 * t1 * di * r * r;
            }
            s2 += t1 * t2 * di / a + t2 * t2 * r * r;
        }
        let next = [if rank > 0 { s1 / rank as f64 } else { 0.0 }, s2 / n as f64];
        let ll_next = vcm1_loglik(d, u, next);
        tau = next;
        let delta = ll_next - ll;
        ll = ll_next;
        trace.push(ll);
        if delta.abs() < tol {
            converged = true;
            break;
        }
    }
    VcmFit { tau2: tau.to_vec(), loglik: ll, trace, iterations, converged, method: FitMethod::Em, fell_back: false }
}

/// Exact two-component fit via the profiled noise variance.
pub fn vcm1_profile_eigen(d: &[f64], u: &[f64]) -> VcmFit {
    let p = fit_vcm1_profile(d, u);
    VcmFit {
        tau2: p.tau.to_vec(),
        loglik: p.loglik,
        trace: vec![p.loglik],
        iterations: 1,
        converged: true,
        method: FitMethod::Profile,
        fell_back: false,
    }
}

struct Moments {
    loglik: f64,
    /// `αᵀ G_j α` with `α = Σ⁻¹ y`
    quad: Vec<f64>,
    /// `tr(Σ⁻¹ G_j)`
    traces: Vec<f64>,
    sigma_inv: DMatrix<f64>,
}

fn moments(spec: &VcmSpec, tau: &[f64], y: &DVector<f64>) -> Result<Moments> {
    let f = factor(spec.covariance(tau), y)?;
    let sigma_inv = f.chol.inverse();
    let quad = spec.components.iter().map(|g| f.alpha.dot(&(g * &f.alpha))).collect();
    let traces = spec.components.iter().map(|g| sigma_inv.component_mul(g).sum()).collect();
    Ok(Moments { loglik: f.loglik, quad, traces, sigma_inv })
}

/// General EM; `τ_j ← τ_j + τ_j²(αᵀG_jα − tr(Σ⁻¹G_j))/rank(G_j)`.
pub fn fit_vcm2_em(spec: &VcmSpec, y: &DVector<f64>, tol: f64, max_iter: usize) -> Result<VcmFit> {
    vcm2_em_from(spec, y, initial_tau(y, spec.n_components()), tol, max_iter)
}

fn vcm2_em_from(spec: &VcmSpec, y: &DVector<f64>, start: Vec<f64>, tol: f64, max_iter: usize) -> Result<VcmFit> {
    if y.len() != spec.n() {
        return Err(PptError::Dimension("y length does not match the model".into()));
    }
    let j = spec.n_components();
    if y.norm_squared() == 0.0 {
        return Ok(VcmFit::degenerate(j, FitMethod::Em));
    }
    let mut tau = start;
    let mut m = moments(spec, &tau, y)?;
    let mut trace = vec![m.loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next: Vec<f64> = (0..j)
            .map(|k| {
                if spec.ranks[k] == 0 {
                    return 0.0;
                }
                let t = tau[k];
                (t + t * t * (m.quad[k] - m.traces[k]) / spec.ranks[k] as f64).max(0.0)
            })
            .collect();
        let m_next = moments(spec, &next, y)?;
        let delta = m_next.loglik - m.loglik;
        tau = next;
        m = m_next;
        trace.push(m.loglik);
        if delta.abs() < tol {
            converged = true;
            break;
        }
    }
    Ok(VcmFit { tau2: tau, loglik: m.loglik, trace, iterations, converged, method: FitMethod::Em, fell_back: false })
}

fn fisher_information(spec: &VcmSpec, sigma_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let j = spec.n_components();
    let products: Vec<DMatrix<f64>> = spec.components.iter().map(|g| sigma_inv * g).collect();
    let mut f = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in a..j {
            let v = 0.5 * products[a].component_mul(&products[b].transpose()).sum();
            f[(a, b)] = v;
            f[(b, a)] = v;
        }
    }
    f
}

/// Fisher scoring with nonnegativity handled by a QP at each step, started
/// from a short EM warm-up.
pub fn fit_vcm2_newton(spec: &VcmSpec, y: &DVector<f64>, tol: f64, max_iter: usize) -> Result<VcmFit> {
    let warm = fit_vcm2_em(spec, y, EM_TOL, NEWTON_WARMUP)?;
    newton_from(spec, y, warm, tol, max_iter)
}

/// Fisher scoring from an explicit starting point.
pub fn fit_vcm2_newton_from(spec: &VcmSpec, y: &DVector<f64>, start: Vec<f64>, tol: f64, max_iter: usize) -> Result<VcmFit> {
    let warm = vcm2_em_from(spec, y, start, EM_TOL, 0)?;
    newton_from(spec, y, warm, tol, max_iter)
}

fn newton_from(spec: &VcmSpec, y: &DVector<f64>, warm: VcmFit, tol: f64, max_iter: usize) -> Result<VcmFit> {
    if !warm.loglik.is_finite() {
        return Ok(VcmFit { method: FitMethod::NewtonFisher, ..warm });
    }
    let mut tau = DVector::from_vec(warm.tau2.clone());
    let mut m = moments(spec, tau.as_slice(), y)?;
    let mut trace = vec![m.loglik];
    let mut converged = false;
    let mut failed = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let score = DVector::from_iterator(tau.len(), m.quad.iter().zip(&m.traces).map(|(q, t)| 0.5 * (q - t)));
        let prob = QpProblem { score, curvature: fisher_information(spec, &m.sigma_inv), anchor: tau.clone() };
        let target = match solve_nonneg_qp(&prob) {
            Ok(t) => t,
            Err(_) => {
                failed = true;
                break;
            }
        };
        let step = &target - &tau;
        if step.norm() <= tol * tau.norm().max(1.0) {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..40 {
            let trial = &tau + &step * scale;
            if let Ok(mt) = moments(spec, trial.as_slice(), y) {
                if mt.loglik >= m.loglik {
                    accepted = Some((trial, mt));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((t, mt)) => {
                let gain = mt.loglik - m.loglik;
                tau = t;
                m = mt;
                trace.push(m.loglik);
                if gain.abs() < 1e-14 * m.loglik.abs().max(1.0) && scale < 1.0 {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    let newton = VcmFit {
        tau2: tau.as_slice().to_vec(),
        loglik: m.loglik,
        trace,
        iterations,
        converged,
        method: FitMethod::NewtonFisher,
        fell_back: false,
    };
    if failed || warm.loglik > newton.loglik {
        return Ok(VcmFit { method: FitMethod::NewtonFisher, fell_back: failed, ..warm });
    }
    Ok(newton)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>() - 0.5);
        let mut g = &a * a.transpose();
        crate::numerics::eigen::symmetrize(&mut g);
        g
    }

    fn random_y(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0)
    }

    fn dense_oracle(sigma: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        let n = y.len() as f64;
        let det = sigma.clone().lu().determinant();
        let inv = sigma.clone().try_inverse().unwrap();
        -0.5 * (n * (2.0 * PI).ln() + det.ln() + (y.transpose() * inv * y)[(0, 0)])
    }

    #[test]
    fn loglik_examples() {
        let n = 4;
        let spec = VcmSpec::vcm2(vec![DMatrix::identity(n, n)]).unwrap();
        let ll = marginal_loglik(&spec, &[1.0], &DVector::zeros(n)).unwrap();
        assert!((ll + 0.5 * n as f64 * (2.0 * PI).ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_y(&mut rng, n);
        let two = VcmSpec::vcm2(vec![DMatrix::identity(n, n), DMatrix::identity(n, n)]).unwrap();
        let a = marginal_loglik(&two, &[0.3, 0.9], &y).unwrap();
        let b = marginal_loglik(&spec, &[1.2], &y).unwrap();
        assert!((a - b).abs() < 1e-12);

        let g = random_psd(&mut rng, 5, 5);
        let spec = VcmSpec::vcm1(g.clone()).unwrap();
        let y = random_y(&mut rng, 5);
        let sigma = &g * 0.7 + DMatrix::identity(5, 5) * 0.4;
        let ll = marginal_loglik(&spec, &[0.7, 0.4], &y).unwrap();
        assert!((ll - dense_oracle(&sigma, &y)).abs() < 1e-10);
    }

    #[test]
    fn vcm1_identity_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_y(&mut rng, 12);
        let fit = fit_vcm1_em(&DMatrix::identity(12, 12), &y, 1e-15, EM_MAX_ITER).unwrap();
        assert!((fit.tau2[0] + fit.tau2[1] - y.norm_squared() / 12.0).abs() < 1e-6, "{:?} {} {}", fit.tau2, y.norm_squared() / 12.0, fit.iterations);
    }

    #[test]
    fn zero_response() {
        let g = DMatrix::identity(5, 5);
        let fit = fit_vcm1_em(&g, &DVector::zeros(5), EM_TOL, EM_MAX_ITER).unwrap();
        assert_eq!(fit.tau2, vec![0.0, 0.0]);
        let spec = VcmSpec::vcm2(vec![g.clone(), g]).unwrap();
        let fit = fit_vcm2_newton(&spec, &DVector::zeros(5), 1e-8, NEWTON_MAX_ITER).unwrap();
        assert!(fit.tau2.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn em_ascent_vcm1_and_vcm2() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in 0..30 {
            let n = 8 + k % 10;
            let g = random_psd(&mut rng, n, 2 + k % n.min(6));
            let y = random_y(&mut rng, n);
            let fit = fit_vcm1_em(&g, &y, EM_TOL, 500).unwrap();
            assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
            let spec = VcmSpec::vcm2(vec![g.clone(), random_psd(&mut rng, n, n), DMatrix::identity(n, n)]).unwrap();
            let fit = fit_vcm2_em(&spec, &y, EM_TOL, 300).unwrap();
            assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        }
    }

    #[test]
    fn vcm2_reduces_to_vcm1() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10;
        let g = random_psd(&mut rng, n, n);
        let y = random_y(&mut rng, n);
        let a = fit_vcm1_em(&g, &y, 1e-12, 100_000).unwrap();
        let spec = VcmSpec::vcm2(vec![g, DMatrix::identity(n, n)]).unwrap();
        let b = fit_vcm2_em(&spec, &y, 1e-12, 100_000).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-6);
    }

    #[test]
    fn single_identity_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = random_y(&mut rng, 9);
        let spec = VcmSpec::vcm2(vec![DMatrix::identity(9, 9)]).unwrap();
        let fit = fit_vcm2_em(&spec, &y, 1e-12, 5000).unwrap();
        assert!((fit.tau2[0] - y.norm_squared() / 9.0).abs() < 1e-8);
    }

    #[test]
    fn newton_fixed_point_and_not_worse_than_em() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 0..15 {
            let n = 10 + k;
            let spec = VcmSpec::vcm2(vec![
                random_psd(&mut rng, n, 3),
                random_psd(&mut rng, n, n),
                DMatrix::identity(n, n),
            ])
            .unwrap();
            let y = random_y(&mut rng, n);
            let em = fit_vcm2_em(&spec, &y, EM_TOL, EM_MAX_ITER).unwrap();
            let nf = fit_vcm2_newton(&spec, &y, 1e-10, NEWTON_MAX_ITER).unwrap();
            assert!(nf.loglik >= em.loglik - 1e-4, "k {k} nf {} em {} {:?} {:?}", nf.loglik, em.loglik, nf.tau2, em.tau2);
            assert!(nf.tau2.iter().all(|&t| t >= 0.0));
        }
        let n = 12;
        let g = random_psd(&mut rng, n, n);
        let spec = VcmSpec::vcm2(vec![g, DMatrix::identity(n, n)]).unwrap();
        let y = random_y(&mut rng, n);
        let em = fit_vcm2_em(&spec, &y, 1e-14, 200_000).unwrap();
        let full = fit_vcm2_newton(&spec, &y, 1e-12, NEWTON_MAX_ITER).unwrap();
        assert!(full.loglik >= em.loglik - 1e-9);
        let nf = fit_vcm2_newton_from(&spec, &y, full.tau2.clone(), 1e-6, 1).unwrap();
        let step: f64 = nf.tau2.iter().zip(&full.tau2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(step < 1e-6, "step {step}");
    }

    #[test]
    fn profile_dominates_em() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let n = 20;
            let g = random_psd(&mut rng, n, n);
            let y = random_y(&mut rng, n);
            let em = fit_vcm1_em(&g, &y, 1e-12, 50_000).unwrap();
            let (v, c) = raw_eigen(&g).unwrap();
            let u = v.tr_mul(&y);
            let prof = vcm1_profile_eigen(c.as_slice(), u.as_slice());
            assert!(prof.loglik >= em.loglik - 1e-9);
            let tol = if prof.tau2.iter().all(|&t| t > 1e-3) { 1e-4 } else { 1e-3 };
            assert!(prof.loglik - em.loglik < tol, "prof {} em {} {:?} {:?} it {}", prof.loglik, em.loglik, prof.tau2, em.tau2, em.iterations);
        }
    }
}
