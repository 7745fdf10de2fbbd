//! Kernel families, sample kernel matrices and bandwidth selection.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlated::Whitener;
use crate::data::{group_index, Dataset};
use crate::error::{PptError, Result};
use crate::gpr::profile::fit_vcm1_profile;
use crate::numerics::eigen::raw_eigen;
use crate::numerics::optim::{nelder_mead, NelderMeadOptions};

/// Jitter added to the kernel matrix inside GPR fits.
pub const DEFAULT_JITTER: f64 = 1e-5;
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    #[default]
    Monomial,
    Fourier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelFamily {
    Linear,
    Polynomial { degree: u32 },
    /// One bandwidth shared by all coordinates, or one per coordinate.
    Gaussian { bandwidths: Vec<f64> },
    RationalQuadratic { bandwidths: Vec<f64>, exponent: f64 },
    TruncatedBasis { q: usize, basis: BasisFamily },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub family: KernelFamily,
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureDimension {
    Finite(usize),
    Infinite,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, jitter: f64) -> Result<Self> {
        let spec = KernelSpec { family, jitter };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear() -> Self {
        KernelSpec { family: KernelFamily::Linear, jitter: 0.0 }
    }

    pub fn polynomial(degree: u32) -> Self {
        KernelSpec { family: KernelFamily::Polynomial { degree }, jitter: 0.0 }
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec { family: KernelFamily::Gaussian { bandwidths: vec![bandwidth] }, jitter: 0.0 }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0) {
            return Err(PptError::invalid("jitter must be nonnegative"));
        }
        let positive = |w: &[f64]| !w.is_empty() && w.iter().all(|&v| v > 0.0 && v.is_finite());
        match &self.family {
            KernelFamily::Linear => Ok(()),
            KernelFamily::Polynomial { degree } if *degree >= 1 => Ok(()),
            KernelFamily::Polynomial { .. } => Err(PptError::invalid("polynomial degree must be ≥ 1")),
            KernelFamily::Gaussian { bandwidths } if positive(bandwidths) => Ok(()),
            KernelFamily::RationalQuadratic { bandwidths, exponent } if positive(bandwidths) && *exponent > 0.0 => Ok(()),
            KernelFamily::Gaussian { .. } | KernelFamily::RationalQuadratic { .. } => {
                Err(PptError::invalid("bandwidths and exponent must be positive"))
            }
            KernelFamily::TruncatedBasis { q, .. } if *q >= 1 => Ok(()),
            KernelFamily::TruncatedBasis { .. } => Err(PptError::invalid("basis truncation q must be ≥ 1")),
        }
    }

    /// True for kernels whose feature space is finite dimensional.
    pub fn is_finite(&self) -> bool {
        matches!(
            self.family,
            KernelFamily::Linear | KernelFamily::Polynomial { .. } | KernelFamily::TruncatedBasis { .. }
        )
    }
}

fn check_bandwidths(w: &[f64], d: usize) -> Result<()> {
    if w.len() == 1 || w.len() == d {
        Ok(())
    } else {
        Err(PptError::Dimension(format!("{} bandwidths for {d} covariates", w.len())))
    }
}

fn weighted_sq_dist(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .enumerate()
        .map(|(k, (a, b))| {
            let wk = if w.len() == 1 { w[0] } else { w[k] };
            wk * (a - b) * (a - b)
        })
        .sum()
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(PptError::Dimension(format!("points of length {} and {}", x.len(), xp.len())));
    }
    let dot = || x.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
    Ok(match &spec.family {
        KernelFamily::Linear => 1.0 + dot(),
        KernelFamily::Polynomial { degree } => (1.0 + dot()).powi(*degree as i32),
        KernelFamily::Gaussian { bandwidths } => {
            check_bandwidths(bandwidths, x.len())?;
            (-weighted_sq_dist(bandwidths, x, xp)).exp()
        }
        KernelFamily::RationalQuadratic { bandwidths, exponent } => {
            check_bandwidths(bandwidths, x.len())?;
            (1.0 + weighted_sq_dist(bandwidths, x, xp)).powf(-exponent)
        }
        KernelFamily::TruncatedBasis { q, basis } => {
            let a = basis_features(*basis, *q, x);
            let b = basis_features(*basis, *q, xp);
            a.iter().zip(&b).map(|(u, v)| u * v).sum()
        }
    })
}

/// Sample kernel matrix with `spec.jitter` added to the diagonal.
pub fn build_kernel_matrix(spec: &KernelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = x.nrows();
    let d = x.ncols();
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut k = DMatrix::zeros(n, n);
    match &spec.family {
        KernelFamily::TruncatedBasis { q, basis } => {
            let phi = design_matrix(&rows, |r| basis_features(*basis, *q, r));
            k = &phi * phi.transpose();
            crate::numerics::eigen::symmetrize(&mut k);
        }
        KernelFamily::Gaussian { bandwidths } | KernelFamily::RationalQuadratic { bandwidths, .. } => {
            check_bandwidths(bandwidths, d)?;
            for j in 0..n {
                for i in j..n {
                    let v = eval_kernel(spec, &rows[i], &rows[j])?;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
        }
        _ => {
            for j in 0..n {
                for i in j..n {
                    let v = eval_kernel(spec, &rows[i], &rows[j])?;
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
        }
    }
    if spec.jitter > 0.0 {
        for i in 0..n {
            k[(i, i)] += spec.jitter;
        }
    }
    Ok(k)
}

fn design_matrix(rows: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let feats: Vec<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
    let q = feats.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), q, |i, j| feats[i][j])
}

pub fn feature_dimension(spec: &KernelSpec, d: usize) -> FeatureDimension {
    match &spec.family {
        KernelFamily::Linear => FeatureDimension::Finite(d + 1),
        KernelFamily::Polynomial { degree } => FeatureDimension::Finite(binomial(d + *degree as usize, d)),
        KernelFamily::TruncatedBasis { q, .. } => FeatureDimension::Finite(*q),
        _ => FeatureDimension::Infinite,
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Multi-indices of total degree ≤ `max_degree` in graded order.
pub fn monomial_exponents(d: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=max_degree {
        let mut current = vec![0; d];
        compositions(total, 0, &mut current, &mut out);
    }
    out
}

fn compositions(rest: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == current.len() {
        current[pos] = rest;
        out.push(current.clone());
        return;
    }
    for k in (0..=rest).rev() {
        current[pos] = k;
        compositions(rest - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

fn monomial(x: &[f64], e: &[usize]) -> f64 {
    x.iter().zip(e).map(|(v, &p)| v.powi(p as i32)).product()
}

/// First `q` basis functions evaluated at `x`.
pub fn basis_features(basis: BasisFamily, q: usize, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    match basis {
        BasisFamily::Monomial => {
            let mut deg = 0;
            while binomial(d + deg, d) < q {
                deg += 1;
            }
            monomial_exponents(d, deg).iter().take(q).map(|e| monomial(x, e)).collect()
        }
        BasisFamily::Fourier => {
            let pi = std::f64::consts::PI;
            let mut out = Vec::with_capacity(q);
            out.push(1.0);
            let mut k = 1.0;
            while out.len() < q {
                for &v in x {
                    out.push((k * pi * v).cos());
                    out.push((k * pi * v).sin());
                }
                k += 1.0;
            }
            out.truncate(q);
            out
        }
    }
}

/// Explicit feature vector for finite-dimensional kernels, spanning the same
/// space as the kernel's feature map.
pub fn explicit_features(spec: &KernelSpec, x: &[f64]) -> Option<Vec<f64>> {
    match &spec.family {
        KernelFamily::Linear => Some(std::iter::once(1.0).chain(x.iter().copied()).collect()),
        KernelFamily::Polynomial { degree } => Some(
            monomial_exponents(x.len(), *degree as usize)
                .iter()
                .map(|e| monomial(x, e))
                .collect(),
        ),
        KernelFamily::TruncatedBasis { q, basis } => Some(basis_features(*basis, *q, x)),
        _ => None,
    }
}

/// `round(n^{2/(2κ+1)})` clamped to `[1, n−1]`.
pub fn choose_q_n(n: usize, kappa: f64) -> usize {
    let q = (n as f64).powf(2.0 / (2.0 * kappa + 1.0)).round() as usize;
    q.clamp(1, n.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFamily {
    Gaussian,
    RationalQuadratic { exponent: f64 },
}

#[derive(Debug, Clone)]
pub struct KernelFitOptions {
    pub isotropic: bool,
    pub jitter: f64,
    pub gamma: f64,
    pub restarts: usize,
    pub log_lower: f64,
    pub log_upper: f64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for KernelFitOptions {
    fn default() -> Self {
        KernelFitOptions {
            isotropic: true,
            jitter: DEFAULT_JITTER,
            gamma: DEFAULT_GAMMA,
            restarts: 5,
            log_lower: -9.0,
            log_upper: 4.0,
            nelder_mead: NelderMeadOptions { initial_step: 0.5, xtol: 1e-2, ftol: 1e-9, max_iter: 500 },
        }
    }
}

/// Kernel matrix for a fit family from precomputed per-coordinate squared
/// differences.
struct DistanceCache {
    n: usize,
    /// one packed lower triangle per coordinate, or a single summed one
    per_coord: Vec<Vec<f64>>,
}

impl DistanceCache {
    fn new(x: &DMatrix<f64>, isotropic: bool) -> Self {
        let n = x.nrows();
        let d = x.ncols();
        let blocks = if isotropic { 1 } else { d };
        let mut per_coord = vec![Vec::with_capacity(n * (n + 1) / 2); blocks];
        for j in 0..n {
            for i in j..n {
                if isotropic {
                    let s: f64 = (0..d).map(|k| (x[(i, k)] - x[(j, k)]).powi(2)).sum();
                    per_coord[0].push(s);
                } else {
                    for (k, block) in per_coord.iter_mut().enumerate() {
                        block.push((x[(i, k)] - x[(j, k)]).powi(2));
                    }
                }
            }
        }
        DistanceCache { n, per_coord }
    }

    fn kernel(&self, family: FitFamily, w: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let mut k = DMatrix::zeros(n, n);
        let mut idx = 0;
        for j in 0..n {
            for i in j..n {
                let s: f64 = self.per_coord.iter().zip(w).map(|(b, wk)| wk * b[idx]).sum();
                let v = match family {
                    FitFamily::Gaussian => (-s).exp(),
                    FitFamily::RationalQuadratic { exponent } => (1.0 + s).powf(-exponent),
                };
                k[(i, j)] = v;
                k[(j, i)] = v;
                idx += 1;
            }
        }
        k
    }
}

/// Maximized H̃0 log marginal likelihood for a fixed kernel matrix `m`
/// (no jitter), with the jitter and `n^{1-γ}` scaling applied internally.
pub fn h0_profile_loglik(m: &DMatrix<f64>, y: &DVector<f64>, jitter: f64, gamma: f64) -> Result<f64> {
    let (v, c) = raw_eigen(m)?;
    let u = v.tr_mul(y);
    let scale = (y.len() as f64).powf(1.0 - gamma);
    let d: Vec<f64> = c.iter().map(|&ci| (ci.max(0.0) + jitter) / scale).collect();
    Ok(fit_vcm1_profile(&d, u.as_slice()).loglik)
}

/// Maximizes the H̃0 marginal likelihood over log-bandwidths for data
/// `(x, y)`, optionally after whitening. Returns bandwidths and the
/// maximized log-likelihood.
pub fn fit_bandwidths(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    whitener: Option<&Whitener>,
    family: FitFamily,
    opts: &KernelFitOptions,
) -> Result<(Vec<f64>, f64)> {
    let dims = if opts.isotropic { 1 } else { x.ncols() };
    let cache = DistanceCache::new(x, opts.isotropic);
    let mut memo: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut failure: Option<PptError> = None;
    let mut objective = |logw: &[f64]| -> f64 {
        let key: Vec<u64> = logw.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let w: Vec<f64> = logw.iter().map(|v| v.exp()).collect();
        let mut m = cache.kernel(family, &w);
        if let Some(wh) = whitener {
            m = wh.conjugate(&m);
        }
        let v = match h0_profile_loglik(&m, y, opts.jitter, opts.gamma) {
            Ok(ll) => -ll,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        };
        memo.insert(key, v);
        v
    };

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut iterations = 0;
    let restarts = opts.restarts.max(1);
    let width = opts.log_upper - opts.log_lower;
    for r in 0..restarts {
        let start = opts.log_lower + width * (r as f64 + 0.5) / restarts as f64;
        let m = nelder_mead(&mut objective, &vec![start; dims], opts.log_lower, opts.log_upper, &opts.nelder_mead);
        iterations += m.iterations;
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value, m.converged));
        }
    }
    let (logw, value, converged) = best.expect("at least one restart");
    if !value.is_finite() {
        return Err(failure.unwrap_or(PptError::NoConvergence { iterations, best: logw, value }));
    }
    if !converged {
        return Err(PptError::NoConvergence { iterations, best: logw.iter().map(|v| v.exp()).collect(), value: -value });
    }
    Ok((logw.iter().map(|v| v.exp()).collect(), -value))
}

/// Group-wise smoothness safeguard: when every group prefers a strictly
/// smaller bandwidth than the pooled fit in every coordinate, use the
/// largest group bandwidth per coordinate.
pub fn apply_group_safeguard(pooled: &[f64], groups: &[Vec<f64>]) -> Vec<f64> {
    if groups.is_empty() {
        return pooled.to_vec();
    }
    let all_smaller = groups.iter().all(|g| g.iter().zip(pooled).all(|(a, b)| a < b));
    if !all_smaller {
        return pooled.to_vec();
    }
    (0..pooled.len())
        .map(|j| groups.iter().map(|g| g[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn spec_for(family: FitFamily, bandwidths: Vec<f64>, jitter: f64) -> KernelSpec {
    let family = match family {
        FitFamily::Gaussian => KernelFamily::Gaussian { bandwidths },
        FitFamily::RationalQuadratic { exponent } => KernelFamily::RationalQuadratic { bandwidths, exponent },
    };
    KernelSpec { family, jitter }
}

/// Smallest group size for which group-specific bandwidths are fitted.
const MIN_GROUP_FOR_FIT: usize = 3;

/// Fits bandwidths by marginal likelihood on the pooled data and applies the
/// group-wise safeguard. `ds` should already be standardized.
pub fn fit_kernel_params(ds: &Dataset, family: FitFamily, opts: &KernelFitOptions) -> Result<KernelSpec> {
    fit_kernel_params_whitened(ds, family, opts, None)
}

/// As [`fit_kernel_params`] for responses `ds.y()` on the original scale
/// whose noise is whitened by `whitener`.
pub(crate) fn fit_kernel_params_whitened(
    ds: &Dataset,
    family: FitFamily,
    opts: &KernelFitOptions,
    whitener: Option<&Whitener>,
) -> Result<KernelSpec> {
    let y = match whitener {
        Some(w) => w.apply(ds.y()),
        None => ds.y().clone(),
    };
    let (pooled, _) = fit_bandwidths(ds.x(), &y, whitener, family, opts)?;
    let gi = group_index(ds);
    let mut group_fits = Vec::new();
    if gi.n_groups() >= 2 && gi.sizes().iter().all(|&s| s >= MIN_GROUP_FOR_FIT) {
        for members in gi.all() {
            let sub = ds.subset(members);
            let wh = whitener.map(|w| w.restrict(members)).transpose()?;
            let y = match &wh {
                Some(w) => w.apply(&sub.y),
                None => sub.y.clone(),
            };
            let (w, _) = fit_bandwidths(&sub.x, &y, wh.as_ref(), family, opts)?;
            group_fits.push(w);
        }
    }
    let bw = apply_group_safeguard(&pooled, &group_fits);
    Ok(spec_for(family, bw, opts.jitter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_values() {
        assert_eq!(eval_kernel(&KernelSpec::linear(), &[0.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(eval_kernel(&KernelSpec::polynomial(2), &[1.0], &[1.0]).unwrap(), 4.0);
        assert_eq!(eval_kernel(&KernelSpec::gaussian(3.7), &[0.3, 1.0], &[0.3, 1.0]).unwrap(), 1.0);
        assert!(eval_kernel(&KernelSpec::linear(), &[0.0], &[0.0, 1.0]).is_err());
        let rq = KernelSpec {
            family: KernelFamily::RationalQuadratic { bandwidths: vec![1.0, 2.0, 3.0], exponent: 1.0 },
            jitter: 0.0,
        };
        assert!(eval_kernel(&rq, &[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn kernel_matrices() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let k = build_kernel_matrix(&KernelSpec::linear(), &x).unwrap();
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        let k = build_kernel_matrix(&KernelSpec::gaussian(1.0), &DMatrix::from_element(1, 1, 0.4)).unwrap();
        assert_eq!(k[(0, 0)], 1.0);
        let k = build_kernel_matrix(&KernelSpec::gaussian(1.0).with_jitter(1e-5), &x).unwrap();
        assert_eq!(k[(0, 0)], 1.0 + 1e-5);
        assert_eq!(k[(1, 1)], 1.0 + 1e-5);
    }

    #[test]
    fn feature_dimensions() {
        assert_eq!(feature_dimension(&KernelSpec::linear(), 3), FeatureDimension::Finite(4));
        assert_eq!(feature_dimension(&KernelSpec::polynomial(2), 1), FeatureDimension::Finite(3));
        assert_eq!(feature_dimension(&KernelSpec::polynomial(3), 2), FeatureDimension::Finite(10));
        assert_eq!(feature_dimension(&KernelSpec::gaussian(1.0), 2), FeatureDimension::Infinite);
    }

    #[test]
    fn explicit_features_span_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(15, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        for spec in [KernelSpec::linear(), KernelSpec::polynomial(2), KernelSpec::polynomial(3)] {
            let k = build_kernel_matrix(&spec, &x).unwrap();
            let es = crate::numerics::eigendecompose_symmetric(&k).unwrap();
            let FeatureDimension::Finite(q) = feature_dimension(&spec, 2) else { panic!() };
            assert_eq!(es.rank(), q);
            let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
            let phi = design_matrix(&rows, |r| explicit_features(&spec, r).unwrap());
            assert_eq!(phi.ncols(), q);
            // tail eigenvectors are orthogonal to the explicit feature span
            let tail = es.vectors.columns(q, 15 - q);
            assert!((tail.transpose() * &phi).amax() < 1e-8);
        }
    }

    #[test]
    fn monomial_basis_recovers_linear_span() {
        assert_eq!(basis_features(BasisFamily::Monomial, 3, &[2.0, 5.0]), vec![1.0, 2.0, 5.0]);
        assert_eq!(basis_features(BasisFamily::Monomial, 5, &[2.0, 5.0]), vec![1.0, 2.0, 5.0, 4.0, 10.0]);
        let f = basis_features(BasisFamily::Fourier, 4, &[0.5]);
        assert!((f[0] - 1.0).abs() < 1e-15 && f[1].abs() < 1e-15 && (f[2] - 1.0).abs() < 1e-15);
        assert_eq!(f.len(), 4);
    }

    #[test]
    fn q_n_rule() {
        assert_eq!(choose_q_n(100, 2.0), 6);
        assert_eq!(choose_q_n(10, 50.0), 1);
        assert_eq!(choose_q_n(2, 0.3), 1);
    }

    #[test]
    fn safeguard_rule() {
        assert_eq!(apply_group_safeguard(&[5.0], &[vec![1.0], vec![2.0]]), vec![2.0]);
        assert_eq!(apply_group_safeguard(&[1.0], &[vec![0.5], vec![3.0]]), vec![1.0]);
        assert_eq!(apply_group_safeguard(&[4.0, 4.0], &[vec![1.0, 5.0], vec![2.0, 1.0]]), vec![4.0, 4.0]);
        assert_eq!(apply_group_safeguard(&[4.0, 4.0], &[vec![1.0, 3.0], vec![2.0, 1.0]]), vec![2.0, 3.0]);
    }

    fn sine_data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + 0.3 * (rng.random::<f64>() - 0.5));
        (x, y)
    }

    #[test]
    fn bandwidth_matches_grid_search() {
        let (x, y) = sine_data(40, 3);
        let opts = KernelFitOptions::default();
        let (w, best) = fit_bandwidths(&x, &y, None, FitFamily::Gaussian, &opts).unwrap();
        let mut grid_best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=1300 {
            let lw = -9.0 + 0.01 * k as f64;
            let m = build_kernel_matrix(&KernelSpec::gaussian(lw.exp()), &x).unwrap();
            let ll = h0_profile_loglik(&m, &y, opts.jitter, opts.gamma).unwrap();
            if ll > grid_best.0 {
                grid_best = (ll, lw);
            }
        }
        assert!((w[0].ln() - grid_best.1).abs() < 0.1, "{} vs {}", w[0].ln(), grid_best.1);
        assert!(best >= grid_best.0 - 1e-6);
    }

    #[test]
    fn fit_is_row_order_invariant() {
        let (x, y) = sine_data(30, 8);
        let labels: Vec<i64> = (0..30).map(|i| 1 + (i % 2) as i64).collect();
        let ds = Dataset::new(x.clone(), y.clone(), &labels).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let ds2 = Dataset::new(
            x.select_rows(&perm),
            DVector::from_iterator(30, perm.iter().map(|&i| y[i])),
            &perm.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        let opts = KernelFitOptions::default();
        let a = fit_kernel_params(&ds, FitFamily::Gaussian, &opts).unwrap();
        let b = fit_kernel_params(&ds2, FitFamily::Gaussian, &opts).unwrap();
        let (KernelFamily::Gaussian { bandwidths: wa }, KernelFamily::Gaussian { bandwidths: wb }) = (a.family, b.family)
        else {
            panic!()
        };
        assert!((wa[0].ln() - wb[0].ln()).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn spec_strategy() -> impl Strategy<Value = KernelSpec> {
            prop_oneof![
                Just(KernelSpec::linear()),
                (1u32..4).prop_map(KernelSpec::polynomial),
                (0.05f64..20.0).prop_map(KernelSpec::gaussian),
                (0.05f64..20.0, 0.2f64..3.0).prop_map(|(w, e)| KernelSpec {
                    family: KernelFamily::RationalQuadratic { bandwidths: vec![w], exponent: e },
                    jitter: 0.0
                }),
                (1usize..6).prop_map(|q| KernelSpec {
                    family: KernelFamily::TruncatedBasis { q, basis: BasisFamily::Monomial },
                    jitter: 0.0
                }),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn symmetric_psd_and_permutation_equivariant(spec in spec_strategy(), seed in 0u64..10_000, n in 2usize..25) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let k = build_kernel_matrix(&spec, &x).unwrap();
                prop_assert_eq!(&k, &k.transpose());
                let ev = k.clone().symmetric_eigenvalues();
                prop_assert!(ev.min() >= -1e-8 * ev.max().max(1e-300));
                for v in k.iter() {
                    if matches!(spec.family, KernelFamily::Gaussian { .. } | KernelFamily::RationalQuadratic { .. }) {
                        prop_assert!(*v > 0.0 && *v <= 1.0);
                    }
                }
                let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
                let mut seen = vec![false; n];
                perm.iter().for_each(|&p| seen[p] = true);
                if seen.iter().all(|&s| s) {
                    let kp = build_kernel_matrix(&spec, &x.select_rows(&perm)).unwrap();
                    for i in 0..n { for j in 0..n {
                        prop_assert!((kp[(i, j)] - k[(perm[i], perm[j])]).abs() <= 1e-12 * k.amax().max(1.0));
                    }}
                }
                if let KernelFamily::TruncatedBasis { q, .. } = spec.family {
                    let es = crate::numerics::eigendecompose_symmetric(&k).unwrap();
                    prop_assert!(es.rank() <= q.min(n));
                }
            }
        }
    }
}
