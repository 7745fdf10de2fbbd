//! Correlated noise: covariance models, whitening and the whitened test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{group_index, Dataset};
use crate::error::{PptError, Result};
use crate::kernels::{build_kernel_matrix, KernelSpec};
use crate::numerics::eigen::spd_roots;
use crate::numerics::eigendecompose_symmetric;
use crate::permute::{run_test, PermutationPlan, TestReport};
use crate::stats::{build_statistic, StatisticContext, StatisticName};

const RHO_CLAMP: f64 = 0.99;

/// Noise covariance known up to scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceModel {
    Dense(DMatrix<f64>),
    /// Unit variances with correlation `rho` inside each (0-based) pair.
    PairedEquicorrelated { pairs: Vec<(usize, usize)>, rho: f64 },
}

fn check_matching(pairs: &[(usize, usize)], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &(i, j) in pairs {
        if i >= n || j >= n || i == j || seen[i] || seen[j] {
            return Err(PptError::invalid(format!("pair ({}, {}) breaks the perfect matching", i + 1, j + 1)));
        }
        seen[i] = true;
        seen[j] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(PptError::invalid("pairs do not cover every observation"));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(PptError::invalid(format!("correlation {rho} must lie in (−1, 1)")))
    }
}

/// Dense covariance matrix of a model.
pub fn expand_covariance(model: &CovarianceModel, n: usize) -> Result<DMatrix<f64>> {
    match model {
        CovarianceModel::Dense(s) => {
            if s.shape() != (n, n) {
                return Err(PptError::Dimension(format!("Σ is {}×{}, expected {n}×{n}", s.nrows(), s.ncols())));
            }
            Ok(s.clone())
        }
        CovarianceModel::PairedEquicorrelated { pairs, rho } => {
            check_matching(pairs, n)?;
            check_rho(*rho)?;
            let mut s = DMatrix::identity(n, n);
            for &(i, j) in pairs {
                s[(i, j)] = *rho;
                s[(j, i)] = *rho;
            }
            Ok(s)
        }
    }
}

/// `Σ^{-1/2}` as a linear map, with its inverse.
#[derive(Debug, Clone)]
pub enum Whitener {
    Dense { inv_sqrt: DMatrix<f64>, sqrt: DMatrix<f64> },
    /// 2×2 blocks `[[a, b], [b, a]]` on each pair, identity elsewhere.
    Paired { n: usize, pairs: Vec<(usize, usize)>, rho: f64 },
}

fn pair_coeffs(rho: f64, power: f64) -> (f64, f64) {
    let p = (1.0 + rho).powf(power);
    let m = (1.0 - rho).powf(power);
    (0.5 * (p + m), 0.5 * (p - m))
}

impl Whitener {
    /// Dense inputs are rescaled to unit mean diagonal first.
    pub fn new(model: &CovarianceModel, n: usize) -> Result<Self> {
        match model {
            CovarianceModel::Dense(_) => {
                let s = expand_covariance(model, n)?;
                let mean_diag = s.trace() / n as f64;
                if !(mean_diag > 0.0) {
                    return Err(PptError::NotSpd(0.0));
                }
                Self::from_dense(&(s / mean_diag))
            }
            CovarianceModel::PairedEquicorrelated { pairs, rho } => {
                check_matching(pairs, n)?;
                check_rho(*rho)?;
                Ok(Whitener::Paired { n, pairs: pairs.clone(), rho: *rho })
            }
        }
    }

    pub fn from_dense(sigma: &DMatrix<f64>) -> Result<Self> {
        let (inv_sqrt, sqrt) = spd_roots(sigma)?;
        Ok(Whitener::Dense { inv_sqrt, sqrt })
    }

    pub fn n(&self) -> usize {
        match self {
            Whitener::Dense { inv_sqrt, .. } => inv_sqrt.nrows(),
            Whitener::Paired { n, .. } => *n,
        }
    }

    fn paired_apply(n: usize, pairs: &[(usize, usize)], (a, b): (f64, f64), y: &DVector<f64>) -> DVector<f64> {
        let mut out = y.clone();
        for &(i, j) in pairs {
            out[i] = a * y[i] + b * y[j];
            out[j] = b * y[i] + a * y[j];
        }
        debug_assert_eq!(out.len(), n);
        out
    }

    /// `Σ^{-1/2} y`
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Whitener::Dense { inv_sqrt, .. } => inv_sqrt * y,
            Whitener::Paired { n, pairs, rho } => Self::paired_apply(*n, pairs, pair_coeffs(*rho, -0.5), y),
        }
    }

    /// `Σ^{1/2} y`
    pub fn unapply(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Whitener::Dense { sqrt, .. } => sqrt * y,
            Whitener::Paired { n, pairs, rho } => Self::paired_apply(*n, pairs, pair_coeffs(*rho, 0.5), y),
        }
    }

    /// `Σ^{-1/2} K Σ^{-1/2}`
    pub fn conjugate(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = match self {
            Whitener::Dense { inv_sqrt, .. } => inv_sqrt * k * inv_sqrt,
            Whitener::Paired { pairs, rho, .. } => {
                let (a, b) = pair_coeffs(*rho, -0.5);
                let mut m = k.clone();
                for &(i, j) in pairs {
                    for c in 0..m.ncols() {
                        let (ri, rj) = (m[(i, c)], m[(j, c)]);
                        m[(i, c)] = a * ri + b * rj;
                        m[(j, c)] = b * ri + a * rj;
                    }
                }
                for &(i, j) in pairs {
                    for r in 0..m.nrows() {
                        let (ci, cj) = (m[(r, i)], m[(r, j)]);
                        m[(r, i)] = a * ci + b * cj;
                        m[(r, j)] = b * ci + a * cj;
                    }
                }
                m
            }
        };
        crate::numerics::eigen::symmetrize(&mut out);
        out
    }

    /// Whitener of the covariance sub-block on rows `idx`.
    pub fn restrict(&self, idx: &[usize]) -> Result<Whitener> {
        match self {
            Whitener::Dense { sqrt, .. } => {
                let sigma = sqrt * sqrt;
                Whitener::from_dense(&sigma.select_rows(idx).select_columns(idx))
            }
            Whitener::Paired { pairs, rho, .. } => {
                let pos = |i: usize| idx.iter().position(|&k| k == i);
                let kept = pairs
                    .iter()
                    .filter_map(|&(i, j)| Some((pos(i)?, pos(j)?)))
                    .collect();
                Ok(Whitener::Paired { n: idx.len(), pairs: kept, rho: *rho })
            }
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            Whitener::Dense { inv_sqrt, .. } => inv_sqrt.clone(),
            Whitener::Paired { n, .. } => {
                let mut m = DMatrix::zeros(*n, *n);
                for c in 0..*n {
                    let mut e = DVector::zeros(*n);
                    e[c] = 1.0;
                    m.set_column(c, &self.apply(&e));
                }
                m
            }
        }
    }
}

/// Whitened responses `Σ^{-1/2} Y` and the whitening map.
pub fn whiten(ds: &Dataset, model: &CovarianceModel) -> Result<(DVector<f64>, Whitener)> {
    let w = Whitener::new(model, ds.n())?;
    Ok((w.apply(ds.y()), w))
}

/// Pearson correlation of paired residuals `Y − f̂`, clamped to ±0.99.
pub fn estimate_structured_rho(ds: &Dataset, pairs: &[(usize, usize)], fitted: &DVector<f64>) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(PptError::invalid(format!("need at least 3 pairs to estimate ρ, got {}", pairs.len())));
    }
    let r = ds.y() - fitted;
    let a: Vec<f64> = pairs.iter().map(|&(i, _)| r[i]).collect();
    let b: Vec<f64> = pairs.iter().map(|&(_, j)| r[j]).collect();
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let rho = if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else if a.iter().zip(&b).all(|(x, y)| x == y) {
        1.0
    } else if a.iter().zip(&b).all(|(x, y)| x == &-y) {
        -1.0
    } else {
        0.0
    };
    Ok(rho.clamp(-RHO_CLAMP, RHO_CLAMP))
}

/// Partial permutation test on whitened responses and the whitened kernel
/// matrix `Σ^{-1/2} K Σ^{-1/2}`.
pub fn run_test_correlated(
    ds: &Dataset,
    kernel: &KernelSpec,
    model: &CovarianceModel,
    plan: &PermutationPlan,
    statistic: StatisticName,
    gamma: f64,
) -> Result<TestReport> {
    let (yc, w) = whiten(ds, model)?;
    let raw = KernelSpec { jitter: 0.0, ..kernel.clone() };
    let kc = w.conjugate(&build_kernel_matrix(&raw, ds.x())?);
    let es = eigendecompose_symmetric(&kc)?;
    let ctx = StatisticContext {
        x: ds.x().clone(),
        groups: group_index(ds),
        kernel: kc,
        eigen: Some(es.clone()),
        spec: kernel.clone(),
        gamma,
        whitener: Some(w.matrix()),
    };
    let stat = build_statistic(statistic, &ctx)?;
    let mut report = run_test(&ds.with_y(yc)?, &es, plan, stat.as_ref())?;
    report.kernel = Some(kernel.clone());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn expansion_examples() {
        let pairs = vec![(0, 2), (1, 3)];
        let s = expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs: pairs.clone(), rho: 0.0 }, 4).unwrap();
        assert_eq!(s, DMatrix::identity(4, 4));
        let s = expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs: pairs.clone(), rho: 0.5 }, 4).unwrap();
        assert_eq!((s[(0, 2)], s[(2, 0)], s[(1, 3)], s[(3, 1)], s[(0, 1)]), (0.5, 0.5, 0.5, 0.5, 0.0));
        let s = expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs: pairs.clone(), rho: -0.5 }, 4).unwrap();
        let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] - 0.5).abs() < 1e-12 && (ev[3] - 1.5).abs() < 1e-12);
        assert!(expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs: vec![(0, 1)], rho: 0.1 }, 4).is_err());
        assert!(expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs, rho: 1.0 }, 4).is_err());
    }

    fn ds_with(y: Vec<f64>) -> Dataset {
        let n = y.len();
        Dataset::new(DMatrix::from_fn(n, 1, |i, _| i as f64), DVector::from_vec(y), &vec![1; n]).unwrap()
    }

    #[test]
    fn whitening_examples() {
        let ds = ds_with(vec![1.0, -2.0, 3.0]);
        let (yc, w) = whiten(&ds, &CovarianceModel::Dense(DMatrix::identity(3, 3))).unwrap();
        assert!((yc - ds.y()).amax() < 1e-14);
        let k = DMatrix::from_fn(3, 3, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        assert!((w.conjugate(&k) - &k).amax() < 1e-14);
        // dense inputs are rescaled, so 4I behaves like I; scale is tested on the raw map
        let w4 = Whitener::from_dense(&(DMatrix::identity(3, 3) * 4.0)).unwrap();
        assert!((w4.apply(ds.y()) - ds.y() / 2.0).amax() < 1e-14);
    }

    #[test]
    fn paired_matches_dense() {
        let pairs = vec![(0, 3), (1, 2), (4, 5)];
        let model = CovarianceModel::PairedEquicorrelated { pairs, rho: -0.4 };
        let s = expand_covariance(&model, 6).unwrap();
        let dense = Whitener::from_dense(&s).unwrap();
        let paired = Whitener::new(&model, 6).unwrap();
        assert!((dense.matrix() - paired.matrix()).amax() < 1e-12);
        let k = DMatrix::from_fn(6, 6, |i, j| (-(i as f64 - j as f64).powi(2) / 4.0).exp());
        assert!((dense.conjugate(&k) - paired.conjugate(&k)).amax() < 1e-12);
        let y = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        assert!((paired.unapply(&paired.apply(&y)) - &y).amax() < 1e-10);
        assert!((dense.unapply(&dense.apply(&y)) - &y).amax() < 1e-10);
        let sub = paired.restrict(&[0, 1, 3]).unwrap();
        let dsub = dense.restrict(&[0, 1, 3]).unwrap();
        assert!((sub.matrix() - dsub.matrix()).amax() < 1e-12);
    }

    #[test]
    fn whitened_noise_is_iid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.3 / (1.0 + (i + j) as f64) });
        let sigma = &a * a.transpose();
        let w = Whitener::from_dense(&sigma).unwrap();
        let chol = sigma.clone().cholesky().unwrap();
        let draws = 100_000;
        let mut cov = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let e = chol.l() * z;
            let wz = w.apply(&e);
            cov += &wz * wz.transpose();
        }
        cov /= draws as f64;
        assert!((cov - DMatrix::identity(n, n)).norm() < 0.02 * (n as f64));
    }

    #[test]
    fn whitened_kernel_is_psd() {
        let s = expand_covariance(&CovarianceModel::PairedEquicorrelated { pairs: vec![(0, 1), (2, 3)], rho: 0.7 }, 4).unwrap();
        let w = Whitener::from_dense(&s).unwrap();
        let k = DMatrix::from_fn(4, 4, |i, j| (-(i as f64 - j as f64).powi(2)).exp());
        let ev = w.conjugate(&k).symmetric_eigenvalues();
        assert!(ev.min() >= -1e-8 * ev.max());
    }

    #[test]
    fn rho_estimation_clamps() {
        let ds = ds_with(vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let pairs = vec![(0, 3), (1, 4), (2, 5)];
        assert_eq!(estimate_structured_rho(&ds, &pairs, &DVector::zeros(6)).unwrap(), 0.99);
        let ds = ds_with(vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        assert_eq!(estimate_structured_rho(&ds, &pairs, &DVector::zeros(6)).unwrap(), -0.99);
        assert!(estimate_structured_rho(&ds, &pairs[..2], &DVector::zeros(6)).is_err());
    }

    #[test]
    fn rho_estimate_sampling_distribution() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let pairs: Vec<(usize, usize)> = (0..n / 2).map(|i| (i, n / 2 + i)).collect();
        let (a, b) = pair_coeffs(0.5, 0.5);
        let mut inside = 0;
        for _ in 0..500 {
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut y = z.clone();
            for &(i, j) in &pairs {
                y[i] = a * z[i] + b * z[j];
                y[j] = b * z[i] + a * z[j];
            }
            let _ = rng.random::<u8>();
            let ds = ds_with(y);
            let r = estimate_structured_rho(&ds, &pairs, &DVector::zeros(n)).unwrap();
            if (0.35..=0.65).contains(&r) {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.95 * 500.0, "{inside}");
    }
}
