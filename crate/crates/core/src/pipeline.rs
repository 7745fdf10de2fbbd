//! End-to-end test: standardization, kernel choice, permutation size,
//! permutation test and correction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::correlated::{estimate_structured_rho, CovarianceModel, Whitener};
use crate::data::{group_index, standardize_parts, Dataset, StandardizationState};
use crate::error::{PptError, Result};
use crate::gpr::GprContext;
use crate::kernels::{
    build_kernel_matrix, fit_kernel_params_whitened, FitFamily, KernelFamily, KernelFitOptions, KernelSpec, DEFAULT_GAMMA,
    DEFAULT_JITTER,
};
use crate::numerics::eigendecompose_symmetric;
use crate::permute::{run_test, Mode, NuisanceSummary, PermutationPlan, TestReport, DEFAULT_PERMUTATIONS};
use crate::sim::{truncate_residuals, TruncationInfo};
use crate::sizing::{choose_b_n, correction_v, correction_v_tilde, losp_gp, Nuisance, Sizing, SizingInputs, SizingMode, ALPHA0_FRACTION};
use crate::stats::{build_statistic, StatisticContext, StatisticName};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum KernelChoice {
    Fixed { spec: KernelSpec },
    /// Bandwidths fitted by marginal likelihood.
    Auto { family: FitFamily },
}

impl KernelChoice {
    fn smooth(&self) -> bool {
        match self {
            KernelChoice::Auto { .. } => true,
            KernelChoice::Fixed { spec } => {
                matches!(spec.family, KernelFamily::Gaussian { .. } | KernelFamily::RationalQuadratic { .. })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BnPolicy {
    Fixed { b_n: usize },
    /// Largest size within the correction budget.
    Auto { mode: SizingMode },
    /// `n − rank(K)`, exact for finite-dimensional kernels.
    NullSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CovarianceInput {
    Model { model: CovarianceModel },
    /// Paired structure with correlation estimated from null-fit residuals.
    PairedAuto { pairs: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub kernel: KernelChoice,
    pub statistic: StatisticName,
    pub mode: Mode,
    pub b_n: BnPolicy,
    pub alpha: f64,
    pub n_perm: usize,
    pub seed: u64,
    /// `None` standardizes for Gaussian and rational-quadratic kernels only.
    pub standardize: Option<bool>,
    pub gamma: f64,
    pub jitter: f64,
    pub covariance: Option<CovarianceInput>,
    pub truncate: Option<f64>,
    /// Correction mode for a fixed permutation size.
    pub correction: Option<SizingMode>,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            kernel: KernelChoice::Auto { family: FitFamily::Gaussian },
            statistic: StatisticName::LrPseudo,
            mode: Mode::Discrete,
            b_n: BnPolicy::Auto { mode: SizingMode::Gp },
            alpha: 0.05,
            n_perm: DEFAULT_PERMUTATIONS,
            seed: 0,
            standardize: None,
            gamma: DEFAULT_GAMMA,
            jitter: DEFAULT_JITTER,
            covariance: None,
            truncate: None,
            correction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub report: TestReport,
    pub statistic: StatisticName,
    pub kernel: KernelSpec,
    pub standardization: StandardizationState,
    pub sizing: Option<Sizing>,
    pub rho: Option<f64>,
    pub truncation: Option<TruncationInfo>,
    /// `true` when the null fit put zero variance on the function component.
    pub boundary_null_fit: bool,
}

fn is_identity(s: &nalgebra::DMatrix<f64>) -> bool {
    let n = s.nrows();
    let d = s[(0, 0)];
    d > 0.0 && (0..n).all(|j| (0..n).all(|i| s[(i, j)] == if i == j { d } else { 0.0 }))
}

fn whitener_for(model: &CovarianceModel, n: usize) -> Result<Option<Whitener>> {
    let sigma = crate::correlated::expand_covariance(model, n)?;
    if is_identity(&sigma) {
        return Ok(None);
    }
    Whitener::new(model, n).map(Some)
}

fn kernel_spec(choice: &KernelChoice, ds: &Dataset, cfg: &TestConfig, whitener: Option<&Whitener>) -> Result<KernelSpec> {
    match choice {
        KernelChoice::Fixed { spec } => {
            spec.validate()?;
            Ok(spec.clone())
        }
        KernelChoice::Auto { family } => {
            let opts = KernelFitOptions { jitter: cfg.jitter, gamma: cfg.gamma, ..KernelFitOptions::default() };
            fit_kernel_params_whitened(ds, *family, &opts, whitener)
        }
    }
}

/// Runs the full test on `ds` according to `cfg`.
///
/// With a covariance, responses are whitened first and the whitened
/// responses are then standardized.
pub fn run_pipeline(ds: &Dataset, cfg: &TestConfig) -> Result<PipelineOutcome> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(PptError::invalid(format!("significance level {} outside (0, 1)", cfg.alpha)));
    }
    let n = ds.n();
    let standardize = cfg.standardize.unwrap_or_else(|| cfg.kernel.smooth());
    let (xs, mut state) = standardize_parts(ds, standardize, false)?;
    let groups = group_index(ds);

    // covariance, possibly with an estimated correlation
    let mut rho = None;
    let whitener = match &cfg.covariance {
        None => None,
        Some(CovarianceInput::Model { model }) => whitener_for(model, n)?,
        Some(CovarianceInput::PairedAuto { pairs }) => {
            let (pre, _) = standardize_parts(&xs, false, standardize)?;
            let spec = kernel_spec(&cfg.kernel, &pre, cfg, None)?;
            let ctx = GprContext::from_dataset(&pre, &KernelSpec { jitter: effective_jitter(&spec, cfg), ..spec }, cfg.gamma)?;
            let post = ctx.null_posterior(pre.y())?;
            let r = estimate_structured_rho(&pre, pairs, &post.fitted)?;
            rho = Some(r);
            whitener_for(&CovarianceModel::PairedEquicorrelated { pairs: pairs.clone(), rho: r }, n)?
        }
    };

    // whitened responses, then standardized
    let mut y = match &whitener {
        Some(w) => w.apply(ds.y()),
        None => ds.y().clone(),
    };
    if standardize {
        let (m, s) = crate::data::mean_sd(y.iter().copied());
        if !(s > 0.0) {
            return Err(PptError::invalid("response y is constant"));
        }
        y.apply(|v| *v = (*v - m) / s);
        state.y_mean = m;
        state.y_sd = s;
        state.applied = true;
    }
    // responses on the unwhitened scale for kernel fitting
    let fit_ds = match &whitener {
        Some(w) => xs.with_y(w.unapply(&y))?,
        None => xs.with_y(y.clone())?,
    };

    let fitted_spec = kernel_spec(&cfg.kernel, &fit_ds, cfg, whitener.as_ref())?;
    let spec = KernelSpec { jitter: effective_jitter(&fitted_spec, cfg), ..fitted_spec };
    let raw = KernelSpec { jitter: 0.0, ..spec.clone() };
    let mut k = build_kernel_matrix(&raw, xs.x())?;
    if let Some(w) = &whitener {
        k = w.conjugate(&k);
    }
    let es = eigendecompose_symmetric(&k)?;
    let ctx = GprContext::with_eigen(k.clone(), es.clone(), groups.clone(), spec.jitter, cfg.gamma)?;

    let mut nuisance = Nuisance::from_context(&ctx, &y)?;
    let mut truncation = None;
    if let Some(tail) = cfg.truncate {
        let (yt, info) = truncate_residuals(&y, &nuisance.fitted, tail)?;
        y = yt;
        truncation = Some(info);
        nuisance = Nuisance::from_context(&ctx, &y)?;
    }

    let alpha0 = ALPHA0_FRACTION * cfg.alpha;
    let (b_n, sizing) = match cfg.b_n {
        BnPolicy::Fixed { b_n } => (b_n, None),
        BnPolicy::NullSpace => (n - es.rank(), None),
        BnPolicy::Auto { mode } => {
            let inputs = SizingInputs { eigen: &es, xi: nuisance.xi, standardized_fit: nuisance.standardized_fit() };
            let s = choose_b_n(mode, &inputs, cfg.alpha)?;
            (s.b_n, Some(s))
        }
    };

    let sctx = StatisticContext {
        x: xs.x().clone(),
        groups,
        kernel: k,
        eigen: Some(es.clone()),
        spec: spec.clone(),
        gamma: cfg.gamma,
        whitener: whitener.as_ref().map(|w| w.matrix()),
    };
    let stat = build_statistic(cfg.statistic, &sctx)?;
    let work = xs.with_y(y)?;
    let plan = PermutationPlan::new(b_n, cfg.mode, cfg.n_perm, cfg.seed);
    let mut report = run_test(&work, &es, &plan, stat.as_ref())?;
    report.kernel = Some(spec.clone());
    report.nuisance = Some(NuisanceSummary { sigma2: nuisance.sigma0_2, delta2: nuisance.delta2, xi: nuisance.xi });

    match (&sizing, cfg.correction) {
        (Some(s), _) => {
            // the budget 1e-3·α bounds correction + α₀
            report.apply_correction(s.budget - s.alpha0, s.alpha0);
            if let Some(w) = &s.warning {
                report.warnings.push(w.clone());
            }
        }
        (None, Some(mode)) => {
            let v = match mode {
                SizingMode::Fixed => {
                    let f = nuisance.standardized_fit();
                    let u = es.project(&f);
                    let omega = u.rows(n - b_n, b_n).norm_squared();
                    correction_v(b_n, omega, alpha0)?
                }
                SizingMode::Gp => correction_v_tilde(b_n, losp_gp(nuisance.xi, &es, b_n)?, alpha0)?,
            };
            report.apply_correction(v, alpha0);
        }
        (None, None) => {}
    }
    let boundary_null_fit = nuisance.delta2 == 0.0;
    if boundary_null_fit && matches!(cfg.b_n, BnPolicy::Auto { mode: SizingMode::Gp }) {
        report.warnings.push("null fit has zero function variance; permutation size may be optimistic".into());
    }

    Ok(PipelineOutcome {
        report,
        statistic: cfg.statistic,
        kernel: spec,
        standardization: state,
        sizing,
        rho,
        truncation,
        boundary_null_fit,
    })
}

/// Smooth kernels always carry the configured jitter; finite kernels keep
/// their own.
fn effective_jitter(spec: &KernelSpec, cfg: &TestConfig) -> f64 {
    match spec.family {
        KernelFamily::Gaussian { .. } | KernelFamily::RationalQuadratic { .. } if spec.jitter == 0.0 => cfg.jitter,
        _ => spec.jitter,
    }
}

/// Responses after whitening and standardization, as used by the test.
pub fn working_response(ds: &Dataset, whitener: Option<&Whitener>, standardize: bool) -> DVector<f64> {
    let mut y = whitener.map_or_else(|| ds.y().clone(), |w| w.apply(ds.y()));
    if standardize {
        let (m, s) = crate::data::mean_sd(y.iter().copied());
        if s > 0.0 {
            y.apply(|v| *v = (*v - m) / s);
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, FunctionId, ScenarioSpec};
    use crate::permute::replicate_rng;

    fn data(seed: u64) -> Dataset {
        generate(&ScenarioSpec::new(1, FunctionId::V, 60, 0.1), &mut replicate_rng(seed, 0)).unwrap()
    }

    #[test]
    fn auto_pipeline_runs() {
        let ds = data(1);
        let cfg = TestConfig { n_perm: 49, seed: 5, ..TestConfig::default() };
        let out = run_pipeline(&ds, &cfg).unwrap();
        let r = &out.report;
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        let s = out.sizing.unwrap();
        assert!((r.corrected_p_value - r.p_value - 1e-3 * 0.05).abs() < 1e-15);
        assert!(s.b_n <= 60);
        assert!(out.standardization.applied);
    }

    #[test]
    fn identity_covariance_is_a_no_op() {
        let ds = data(2);
        let base = TestConfig {
            kernel: KernelChoice::Fixed { spec: KernelSpec::gaussian(1.0).with_jitter(1e-5) },
            n_perm: 49,
            seed: 7,
            ..TestConfig::default()
        };
        let a = run_pipeline(&ds, &base).unwrap();
        let with = TestConfig {
            covariance: Some(CovarianceInput::Model { model: CovarianceModel::Dense(nalgebra::DMatrix::identity(60, 60) * 3.0) }),
            ..base
        };
        let b = run_pipeline(&ds, &with).unwrap();
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn null_space_policy_for_linear_kernel() {
        let ds = data(3);
        let cfg = TestConfig {
            kernel: KernelChoice::Fixed { spec: KernelSpec::linear() },
            statistic: StatisticName::F,
            b_n: BnPolicy::NullSpace,
            n_perm: 49,
            ..TestConfig::default()
        };
        let out = run_pipeline(&ds, &cfg).unwrap();
        assert_eq!(out.report.b_n, 58);
        assert!(!out.standardization.applied);
    }

    #[test]
    fn truncation_is_recorded() {
        let ds = data(4);
        let cfg = TestConfig {
            kernel: KernelChoice::Fixed { spec: KernelSpec::gaussian(1.0) },
            truncate: Some(0.02),
            n_perm: 19,
            ..TestConfig::default()
        };
        let out = run_pipeline(&ds, &cfg).unwrap();
        let t = out.truncation.unwrap();
        assert_eq!(t.tail, 0.02);
        assert!(t.clamped >= 2);
    }

    #[test]
    fn estimated_rho_is_reported() {
        let spec = ScenarioSpec::new(6, FunctionId::I, 80, 0.1).with_rho(-0.5);
        let ds = generate(&spec, &mut replicate_rng(9, 0)).unwrap();
        let cfg = TestConfig {
            kernel: KernelChoice::Fixed { spec: KernelSpec::gaussian(2.0) },
            covariance: Some(CovarianceInput::PairedAuto { pairs: spec.pairs() }),
            n_perm: 19,
            ..TestConfig::default()
        };
        let out = run_pipeline(&ds, &cfg).unwrap();
        let r = out.rho.unwrap();
        assert!(r < 0.0 && r > -0.99);
    }
}
