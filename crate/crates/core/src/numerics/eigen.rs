use std::sync::Once;

use nalgebra::{DMatrix, DVector};

use crate::error::{PptError, Result};

/// Relative threshold below which an eigenvalue counts as zero for rank.
pub const RANK_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
const SYM_TOL: f64 = 1e-10;

/// Orthonormal eigenvectors (columns) with eigenvalues sorted descending and
/// clamped at zero.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Number of eigenvalues above `RANK_TOL` times the largest.
    pub fn rank(&self) -> usize {
        let top = self.values.get(0).copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.values.iter().filter(|&&c| c > RANK_TOL * top).count()
    }

    /// `Γᵀ y`
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(y)
    }

    /// `Γ w`
    pub fn reconstruct(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.vectors * w
    }

    /// `Γ diag(c) Γᵀ`
    pub fn matrix(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.n(), self.n(), |i, j| self.vectors[(i, j)] * self.values[j]);
        scaled * self.vectors.transpose()
    }
}

fn sequential_backend() {
    static INIT: Once = Once::new();
    INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

pub(crate) fn check_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(PptError::Dimension(format!("{}×{} matrix is not square", k.nrows(), k.ncols())));
    }
    let scale = k.amax().max(1.0);
    let n = k.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    if worst > SYM_TOL * scale {
        return Err(PptError::NotSymmetric(worst));
    }
    Ok(())
}

/// Raw symmetric eigendecomposition, eigenvalues descending, no clamping.
pub(crate) fn raw_eigen(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    sequential_backend();
    let n = k.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DVector::zeros(0)));
    }
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| k[(i, j)]);
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| PptError::Eigen(format!("{e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    let values = DVector::from_fn(n, |j, _| s[n - 1 - j]);
    Ok((vectors, values))
}

/// Eigendecomposition of a symmetric PSD matrix; negative eigenvalues down
/// to `-1e-8·c₁` are clamped to 0.
pub fn eigendecompose_symmetric(k: &DMatrix<f64>) -> Result<EigenSystem> {
    check_symmetric(k)?;
    let (vectors, mut values) = raw_eigen(k)?;
    let n = values.len();
    if n > 0 {
        let top = values[0].max(0.0);
        let bottom = values[n - 1];
        if bottom < 0.0 && bottom < -PSD_TOL * top {
            return Err(PptError::NotPsd { min: bottom, max: top });
        }
        values.apply(|c| *c = c.max(0.0));
    }
    let es = EigenSystem { vectors, values };
    #[cfg(test)]
    verify(k, &es);
    Ok(es)
}

#[cfg(test)]
fn verify(k: &DMatrix<f64>, es: &EigenSystem) {
    let n = es.n();
    let orth = es.vectors.tr_mul(&es.vectors) - DMatrix::<f64>::identity(n, n);
    assert!(orth.amax() < 1e-8, "eigenvectors not orthonormal: {}", orth.amax());
    let scale = es.values.get(0).copied().unwrap_or(0.0).max(1.0);
    let rec = (es.matrix() - k).amax() / scale;
    assert!(rec < 1e-8, "reconstruction error {rec}");
}

/// Symmetric `Σ^{-1/2}` of a symmetric positive definite matrix.
pub fn inverse_sqrt_spd(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, _) = spd_roots(sigma)?;
    Ok(m)
}

/// `(Σ^{-1/2}, Σ^{1/2})`
pub(crate) fn spd_roots(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_symmetric(sigma)?;
    let (v, c) = raw_eigen(sigma)?;
    let n = c.len();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let top = c[0];
    let bottom = c[n - 1];
    if !(top > 0.0) || bottom <= 1e-12 * top {
        return Err(PptError::NotSpd(if top > 0.0 { bottom / top } else { 0.0 }));
    }
    let scaled_inv = DMatrix::from_fn(n, n, |i, j| v[(i, j)] / c[j].sqrt());
    let scaled = DMatrix::from_fn(n, n, |i, j| v[(i, j)] * c[j].sqrt());
    let mut inv = &scaled_inv * v.transpose();
    let mut root = &scaled * v.transpose();
    symmetrize(&mut inv);
    symmetrize(&mut root);
    Ok((inv, root))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}
