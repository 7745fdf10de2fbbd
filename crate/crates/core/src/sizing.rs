//! Left-over signal proportions, correction terms and the permutation-size
//! rule.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PptError, Result};
use crate::gpr::GprContext;
use crate::kernels::KernelSpec;
use crate::numerics::{chi2_quantile, EigenSystem};

/// `α₀ = 1e-4·α`
pub const ALPHA0_FRACTION: f64 = 1e-4;
/// Total correction budget `1e-3·α`.
pub const BUDGET_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SizingMode {
    /// Fixed-function correction with plug-in `f̂`, `σ̂₀`.
    Fixed,
    /// Gaussian-process correction with plug-in variance ratio.
    #[default]
    Gp,
}

impl std::str::FromStr for SizingMode {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SizingMode::Fixed),
            "gp" => Ok(SizingMode::Gp),
            other => Err(PptError::invalid(format!("unknown sizing mode '{other}'"))),
        }
    }
}

fn check_b(es: &EigenSystem, b_n: usize) -> Result<()> {
    if b_n > es.n() {
        return Err(PptError::invalid(format!("permutation size {b_n} exceeds n = {}", es.n())));
    }
    Ok(())
}

/// `σ⁻² Σ_{tail} (γᵢᵀ f)²` over the last `b_n` eigenvectors.
pub fn losp_fixed(es: &EigenSystem, f: &DVector<f64>, sigma: f64, b_n: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(PptError::invalid(format!("noise scale must be positive, got {sigma}")));
    }
    check_b(es, b_n)?;
    let u = es.project(f);
    let n = es.n();
    Ok(u.rows(n - b_n, b_n).norm_squared() / (sigma * sigma))
}

fn chi2_upper(b_n: usize, alpha0: f64) -> Result<f64> {
    chi2_quantile(b_n as f64, 1.0 - alpha0)
}

/// `½·exp{2√(2ω)·√(Q_b(1−α₀)+ω)} − ½`
pub fn correction_v(b_n: usize, omega: f64, alpha0: f64) -> Result<f64> {
    if b_n == 0 || omega == 0.0 {
        return Ok(0.0);
    }
    let q = chi2_upper(b_n, alpha0)?;
    Ok(0.5 * (2.0 * (2.0 * omega).sqrt() * (q + omega).sqrt()).exp_m1())
}

/// `ξ · c_{n−b+1}`
pub fn losp_gp(xi: f64, es: &EigenSystem, b_n: usize) -> Result<f64> {
    check_b(es, b_n)?;
    if b_n == 0 {
        return Ok(0.0);
    }
    let c = es.values[es.n() - b_n];
    Ok(if c == 0.0 || xi == 0.0 { 0.0 } else { xi * c })
}

/// `½·exp{½·ω̃·Q_b(1−α₀)} − ½`
pub fn correction_v_tilde(b_n: usize, omega: f64, alpha0: f64) -> Result<f64> {
    if b_n == 0 || omega == 0.0 {
        return Ok(0.0);
    }
    let q = chi2_upper(b_n, alpha0)?;
    Ok(0.5 * (0.5 * omega * q).exp_m1())
}

/// `raw + v + α₀`, uncapped.
pub fn corrected_pvalue(raw: f64, v: f64, alpha0: f64) -> f64 {
    raw + v + alpha0
}

/// Plug-in estimates from the null GPR fit.
#[derive(Debug, Clone)]
pub struct Nuisance {
    /// `(δ̂²/n^{1−γ}) / σ̂²` with `σ̂²` the fitted noise variance.
    pub xi: f64,
    pub delta2: f64,
    /// Fitted noise variance of the null model.
    pub noise2: f64,
    /// Posterior mean at the observed covariates.
    pub fitted: DVector<f64>,
    /// `n⁻¹‖Y − f̂‖²`
    pub sigma0_2: f64,
}

impl Nuisance {
    pub fn from_context(ctx: &GprContext, y: &DVector<f64>) -> Result<Self> {
        let post = ctx.null_posterior(y)?;
        let n = y.len() as f64;
        let scale = n.powf(1.0 - ctx.gamma());
        let sigma0_2 = (y - &post.fitted).norm_squared() / n;
        let xi = if post.delta2 == 0.0 {
            0.0
        } else if post.noise2 > 0.0 {
            post.delta2 / scale / post.noise2
        } else {
            f64::INFINITY
        };
        Ok(Nuisance { xi, delta2: post.delta2, noise2: post.noise2, fitted: post.fitted, sigma0_2 })
    }

    /// `σ̂₀⁻¹ f̂`
    pub fn standardized_fit(&self) -> DVector<f64> {
        if self.sigma0_2 > 0.0 {
            &self.fitted / self.sigma0_2.sqrt()
        } else {
            DVector::zeros(self.fitted.len())
        }
    }
}

/// Null-model plug-ins for `ds` with kernel `kernel`.
pub fn estimate_nuisance(ds: &Dataset, kernel: &KernelSpec, gamma: f64) -> Result<Nuisance> {
    Nuisance::from_context(&GprContext::from_dataset(ds, kernel, gamma)?, ds.y())
}

pub struct SizingInputs<'a> {
    pub eigen: &'a EigenSystem,
    pub xi: f64,
    /// `σ̂₀⁻¹ f̂`
    pub standardized_fit: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sizing {
    pub b_n: usize,
    pub alpha0: f64,
    /// Correction term at the chosen size.
    pub correction: f64,
    /// Amount added to the raw p-value, `1e-3·α`.
    pub budget: f64,
    pub warning: Option<String>,
}

/// Correction term as a function of the permutation size.
struct CorrectionCurve<'a> {
    mode: SizingMode,
    inputs: &'a SizingInputs<'a>,
    /// `Σ_{i > n−b} u_i²` for `b = 0..=n`
    tail_energy: Vec<f64>,
    alpha0: f64,
}

impl<'a> CorrectionCurve<'a> {
    fn new(mode: SizingMode, inputs: &'a SizingInputs<'a>, alpha0: f64) -> Self {
        let n = inputs.eigen.n();
        let mut tail_energy = vec![0.0; n + 1];
        if mode == SizingMode::Fixed {
            let u = inputs.eigen.project(&inputs.standardized_fit);
            for b in 1..=n {
                tail_energy[b] = tail_energy[b - 1] + u[n - b] * u[n - b];
            }
        }
        CorrectionCurve { mode, inputs, tail_energy, alpha0 }
    }

    fn at(&self, b: usize) -> Result<f64> {
        match self.mode {
            SizingMode::Fixed => correction_v(b, self.tail_energy[b], self.alpha0),
            SizingMode::Gp => correction_v_tilde(b, losp_gp(self.inputs.xi, self.inputs.eigen, b)?, self.alpha0),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PptError::invalid(format!("significance level {alpha} outside (0, 1)")))
    }
}

fn finish(curve: &CorrectionCurve, b_n: usize, alpha: f64) -> Result<Sizing> {
    let warning = (b_n == 0).then(|| "no permutation size satisfies the correction budget".to_string());
    Ok(Sizing { b_n, alpha0: curve.alpha0, correction: curve.at(b_n)?, budget: BUDGET_FRACTION * alpha, warning })
}

/// Largest `b` with `correction(b) + α₀ ≤ 1e-3·α`, by binary search over the
/// nondecreasing correction curve.
pub fn choose_b_n(mode: SizingMode, inputs: &SizingInputs, alpha: f64) -> Result<Sizing> {
    check_alpha(alpha)?;
    let alpha0 = ALPHA0_FRACTION * alpha;
    let budget = BUDGET_FRACTION * alpha;
    let curve = CorrectionCurve::new(mode, inputs, alpha0);
    let ok = |b: usize| -> Result<bool> {
        let v = curve.at(b)?;
        Ok(v.is_finite() && v + alpha0 <= budget)
    };
    // invariant: ok(lo) holds, ok(hi + 1) fails or hi = n
    let (mut lo, mut hi) = (0usize, inputs.eigen.n());
    if ok(hi)? {
        return finish(&curve, hi, alpha);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(&curve, lo, alpha)
}

/// Exhaustive scan counterpart of [`choose_b_n`].
pub fn choose_b_n_scan(mode: SizingMode, inputs: &SizingInputs, alpha: f64) -> Result<Sizing> {
    check_alpha(alpha)?;
    let alpha0 = ALPHA0_FRACTION * alpha;
    let budget = BUDGET_FRACTION * alpha;
    let curve = CorrectionCurve::new(mode, inputs, alpha0);
    let mut best = 0;
    for b in 0..=inputs.eigen.n() {
        let v = curve.at(b)?;
        if v.is_finite() && v + alpha0 <= budget {
            best = b;
        }
    }
    finish(&curve, best, alpha)
}
