//! GPR null and alternative models expressed as variance-component models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{group_index, Dataset, GroupIndex};
use crate::error::{PptError, Result};
use crate::gpr::vcm::{
    fit_vcm2_newton, fit_vcm2_newton_from, vcm1_em_eigen, vcm1_profile_eigen, FitMethod, VcmFit, VcmSpec, EM_MAX_ITER,
    EM_TOL, NEWTON_MAX_ITER,
};
use crate::kernels::{build_kernel_matrix, KernelSpec};
use crate::numerics::{eigendecompose_symmetric, EigenSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GprModel {
    /// Shared function plus iid noise.
    H0,
    /// Shared plus group-specific functions, common noise.
    H1,
    /// Shared plus group-specific functions, group-specific noise.
    #[serde(rename = "h1prime")]
    H1Prime,
    /// Independent two-component fits per group.
    Pseudo,
}

impl std::str::FromStr for GprModel {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h0" => Ok(GprModel::H0),
            "h1" => Ok(GprModel::H1),
            "h1prime" | "h1-prime" | "h1'" => Ok(GprModel::H1Prime),
            "pseudo" => Ok(GprModel::Pseudo),
            other => Err(PptError::invalid(format!("unknown model '{other}'"))),
        }
    }
}

/// How two-component (shared function plus noise) models are maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Vcm1Method {
    /// Closed-form noise variance with a 1-d search over the variance ratio.
    #[default]
    Profile,
    /// Diagonalized EM iteration.
    Em,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprModelSpec {
    pub model: GprModel,
    pub kernel: KernelSpec,
    pub gamma: f64,
    #[serde(default)]
    pub vcm1_method: Vcm1Method,
}

/// Posterior summary of the null model used for sizing and residuals.
#[derive(Debug, Clone)]
pub struct NullPosterior {
    pub fit: VcmFit,
    /// `δ̂²` (the raw scale of the shared-function component)
    pub delta2: f64,
    /// Noise variance of the equivalent un-jittered model.
    pub noise2: f64,
    pub fitted: DVector<f64>,
}

/// Kernel matrix, its eigensystem and per-group blocks, shared by every
/// model fit on the same covariates.
#[derive(Debug, Clone)]
pub struct GprContext {
    kernel: DMatrix<f64>,
    eigen: EigenSystem,
    groups: GroupIndex,
    group_eigen: Vec<EigenSystem>,
    jitter: f64,
    gamma: f64,
    method: Vcm1Method,
}

impl GprContext {
    /// `kernel` is the un-jittered (possibly whitened) kernel matrix.
    pub fn new(kernel: DMatrix<f64>, groups: GroupIndex, jitter: f64, gamma: f64) -> Result<Self> {
        let eigen = eigendecompose_symmetric(&kernel)?;
        Self::with_eigen(kernel, eigen, groups, jitter, gamma)
    }

    pub fn with_eigen(kernel: DMatrix<f64>, eigen: EigenSystem, groups: GroupIndex, jitter: f64, gamma: f64) -> Result<Self> {
        let group_eigen = groups
            .all()
            .iter()
            .map(|m| eigendecompose_symmetric(&kernel.select_rows(m).select_columns(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GprContext { kernel, eigen, groups, group_eigen, jitter, gamma, method: Vcm1Method::default() })
    }

    pub fn from_dataset(ds: &Dataset, kernel: &KernelSpec, gamma: f64) -> Result<Self> {
        let raw = KernelSpec { jitter: 0.0, ..kernel.clone() };
        let k = build_kernel_matrix(&raw, ds.x())?;
        Self::new(k, group_index(ds), kernel.jitter, gamma)
    }

    pub fn with_method(mut self, method: Vcm1Method) -> Self {
        self.method = method;
        self
    }

    pub fn n(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.eigen
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn groups(&self) -> &GroupIndex {
        &self.groups
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn scale(&self) -> f64 {
        (self.n() as f64).powf(1.0 - self.gamma)
    }

    fn two_component(&self, es: &EigenSystem, y: &DVector<f64>) -> VcmFit {
        let scale = self.scale();
        let d: Vec<f64> = es.values.iter().map(|&c| (c + self.jitter) / scale).collect();
        let u = es.project(y);
        match self.method {
            Vcm1Method::Profile => vcm1_profile_eigen(&d, u.as_slice()),
            Vcm1Method::Em => vcm1_em_eigen(&d, u.as_slice(), None, EM_TOL, EM_MAX_ITER),
        }
    }

    fn subvector(y: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]))
    }

    /// Variance components for H̃1 (`noise_per_group = false`) or H̃1'.
    pub fn alternative_spec(&self, noise_per_group: bool) -> Result<VcmSpec> {
        let n = self.n();
        let scale = self.scale();
        let mut shared = self.kernel.clone() / scale;
        for i in 0..n {
            shared[(i, i)] += self.jitter / scale;
        }
        let mut comps = vec![shared.clone()];
        for m in self.groups.all() {
            let mut g = DMatrix::zeros(n, n);
            for &i in m {
                for &j in m {
                    g[(i, j)] = shared[(i, j)];
                }
            }
            comps.push(g);
        }
        if noise_per_group {
            for m in self.groups.all() {
                let mut g = DMatrix::zeros(n, n);
                for &i in m {
                    g[(i, i)] = 1.0;
                }
                comps.push(g);
            }
        } else {
            comps.push(DMatrix::identity(n, n));
        }
        VcmSpec::vcm2(comps)
    }

    pub fn fit(&self, model: GprModel, y: &DVector<f64>) -> Result<VcmFit> {
        if y.len() != self.n() {
            return Err(PptError::Dimension(format!("response of length {} for {} rows", y.len(), self.n())));
        }
        match model {
            GprModel::H0 => Ok(self.two_component(&self.eigen, y)),
            GprModel::Pseudo => {
                let mut tau2 = Vec::new();
                let mut loglik = 0.0;
                let mut iterations = 0;
                let mut converged = true;
                let mut method = FitMethod::Profile;
                for (m, es) in self.groups.all().iter().zip(&self.group_eigen) {
                    let f = self.two_component(es, &Self::subvector(y, m));
                    tau2.extend_from_slice(&f.tau2);
                    loglik += f.loglik;
                    iterations += f.iterations;
                    converged &= f.converged;
                    method = f.method;
                }
                Ok(VcmFit { tau2, loglik, trace: vec![loglik], iterations, converged, method, fell_back: false })
            }
            GprModel::H1 | GprModel::H1Prime => {
                let spec = self.alternative_spec(model == GprModel::H1Prime)?;
                let mut best = fit_vcm2_newton(&spec, y, 1e-8, NEWTON_MAX_ITER)?;
                // the null fit embedded with zero group components
                let null = self.two_component(&self.eigen, y);
                if null.loglik.is_finite() {
                    let h = self.groups.n_groups();
                    let mut start = vec![null.tau2[0]];
                    start.extend(std::iter::repeat_n(0.0, h));
                    let noise = null.tau2[1].max(1e-12 * null.tau2[0]).max(f64::MIN_POSITIVE);
                    let reps = if model == GprModel::H1Prime { h } else { 1 };
                    start.extend(std::iter::repeat_n(noise, reps));
                    if let Ok(alt) = fit_vcm2_newton_from(&spec, y, start, 1e-8, NEWTON_MAX_ITER) {
                        if alt.loglik > best.loglik {
                            best = alt;
                        }
                    }
                }
                Ok(best)
            }
        }
    }

    /// `max loglik(alt) − max loglik(H̃0)`
    pub fn lr_statistic(&self, alt: GprModel, y: &DVector<f64>) -> Result<f64> {
        if alt == GprModel::H0 {
            return Err(PptError::invalid("alternative model must differ from H0"));
        }
        let a = self.fit(alt, y)?;
        let b = self.fit(GprModel::H0, y)?;
        Ok(a.loglik - b.loglik)
    }

    /// Null fit with posterior mean at the observed covariates.
    pub fn null_posterior(&self, y: &DVector<f64>) -> Result<NullPosterior> {
        let fit = self.fit(GprModel::H0, y)?;
        let scale = self.scale();
        let (t1, t2) = (fit.tau2[0], fit.tau2[1]);
        let noise2 = t2 + self.jitter * t1 / scale;
        let fitted = if t1 == 0.0 {
            DVector::zeros(self.n())
        } else {
            let u = self.eigen.project(y);
            let w = DVector::from_fn(self.n(), |i, _| {
                let c = self.eigen.values[i];
                let a = t1 * (c + self.jitter) / scale + t2;
                if a > 0.0 {
                    t1 * c / scale / a * u[i]
                } else {
                    0.0
                }
            });
            self.eigen.reconstruct(&w)
        };
        Ok(NullPosterior { fit, delta2: t1, noise2, fitted })
    }

    /// Posterior means under the pooled null fit and the per-group fits.
    pub fn pooled_and_group_means(&self, y: &DVector<f64>) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let pooled = self.null_posterior(y)?.fitted;
        let scale = self.scale();
        let mut groups = Vec::with_capacity(self.groups.n_groups());
        for (m, es) in self.groups.all().iter().zip(&self.group_eigen) {
            let yh = Self::subvector(y, m);
            let f = self.two_component(es, &yh);
            let (t1, t2) = (f.tau2[0], f.tau2[1]);
            let u = es.project(&yh);
            let w = DVector::from_fn(m.len(), |i, _| {
                let c = es.values[i];
                let a = t1 * (c + self.jitter) / scale + t2;
                if a > 0.0 {
                    t1 * c / scale / a * u[i]
                } else {
                    0.0
                }
            });
            groups.push(es.reconstruct(&w));
        }
        Ok((pooled, groups))
    }
}

/// Fits one of the GPR models to a dataset.
pub fn fit_model(ds: &Dataset, spec: &GprModelSpec) -> Result<VcmFit> {
    GprContext::from_dataset(ds, &spec.kernel, spec.gamma)?
        .with_method(spec.vcm1_method)
        .fit(spec.model, ds.y())
}

/// Likelihood-ratio statistic of `alt` against H̃0.
pub fn lr_statistic(ds: &Dataset, alt: GprModel, kernel: &KernelSpec, gamma: f64) -> Result<f64> {
    GprContext::from_dataset(ds, kernel, gamma)?.lr_statistic(alt, ds.y())
}
