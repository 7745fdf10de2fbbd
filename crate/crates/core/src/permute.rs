//! Discrete and continuous partial permutation engines.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PptError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::EigenSystem;

/// Default Monte-Carlo replicate count.
pub const DEFAULT_PERMUTATIONS: usize = 999;
/// Tail sizes up to this many are enumerated exhaustively in discrete mode.
pub const EXHAUSTIVE_MAX: usize = 5;
const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Discrete,
    Continuous,
}

impl std::str::FromStr for Mode {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Mode::Discrete),
            "continuous" => Ok(Mode::Continuous),
            other => Err(PptError::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub b_n: usize,
    pub mode: Mode,
    pub n_perm: usize,
    pub seed: u64,
}

impl PermutationPlan {
    pub fn new(b_n: usize, mode: Mode, n_perm: usize, seed: u64) -> Self {
        PermutationPlan { b_n, mode, n_perm, seed }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.b_n > n {
            return Err(PptError::invalid(format!("permutation size {} exceeds n = {n}", self.b_n)));
        }
        if self.n_perm == 0 {
            return Err(PptError::invalid("at least one permutation replicate is required"));
        }
        Ok(())
    }

    /// Whether the tail permutations are enumerated instead of sampled.
    pub fn is_exhaustive(&self) -> bool {
        self.mode == Mode::Discrete && self.b_n >= 1 && self.b_n <= EXHAUSTIVE_MAX
    }
}

/// Plug-in nuisance estimates recorded in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub sigma2: f64,
    pub delta2: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub permuted: Vec<f64>,
    pub p_value: f64,
    pub correction: Option<f64>,
    pub alpha0: Option<f64>,
    pub corrected_p_value: f64,
    pub b_n: usize,
    pub mode: Mode,
    pub n_perm: usize,
    pub exhaustive: bool,
    pub seed: u64,
    pub kernel: Option<KernelSpec>,
    pub nuisance: Option<NuisanceSummary>,
    pub warnings: Vec<String>,
}

impl TestReport {
    /// Adds a correction term and `α₀` to the raw p-value.
    pub fn apply_correction(&mut self, correction: f64, alpha0: f64) {
        self.correction = Some(correction);
        self.alpha0 = Some(alpha0);
        self.corrected_p_value = crate::sizing::corrected_pvalue(self.p_value, correction, alpha0);
        if self.corrected_p_value > 1.0 {
            self.warnings.push("corrected p-value exceeds 1".into());
        }
    }
}

/// A test statistic of the response vector; covariates and groups are fixed
/// by the implementor.
pub trait Statistic: Sync {
    fn evaluate(&self, y: &DVector<f64>) -> Result<f64>;
}

impl<F> Statistic for F
where
    F: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    fn evaluate(&self, y: &DVector<f64>) -> Result<f64> {
        self(y)
    }
}

/// Independent generator for replicate `index` of the master `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `W = Γᵀ Y`
pub fn project_responses(es: &EigenSystem, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != es.n() {
        return Err(PptError::Dimension(format!("response of length {} for {} eigenvectors", y.len(), es.n())));
    }
    Ok(es.project(y))
}

/// Uniformly shuffles the last `b_n` entries.
pub fn sample_discrete<R: Rng + ?Sized>(w: &DVector<f64>, b_n: usize, rng: &mut R) -> DVector<f64> {
    let mut out = w.clone();
    let n = out.len();
    out.as_mut_slice()[n - b_n..].shuffle(rng);
    out
}

/// Replaces the last `b_n` entries by a uniform point on the sphere with the
/// same radius.
pub fn sample_continuous<R: Rng + ?Sized>(w: &DVector<f64>, b_n: usize, rng: &mut R) -> DVector<f64> {
    let mut out = w.clone();
    let n = out.len();
    let tail = &mut out.as_mut_slice()[n - b_n..];
    let radius = tail.iter().map(|v| v * v).sum::<f64>().sqrt();
    if radius == 0.0 {
        return out;
    }
    loop {
        for v in tail.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = tail.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let s = radius / norm;
            tail.iter_mut().for_each(|v| *v *= s);
            return out;
        }
    }
}

fn exceeds(t: f64, observed: f64) -> bool {
    t >= observed - TIE_TOL * (1.0 + observed.abs())
}

fn checked(stat: &dyn Statistic, y: &DVector<f64>, replicate: usize) -> Result<f64> {
    let t = stat
        .evaluate(y)
        .map_err(|e| PptError::Replicate { replicate, source: Box::new(e) })?;
    if !t.is_finite() {
        return Err(PptError::NonFiniteStatistic { replicate, value: t });
    }
    Ok(t)
}

/// All permutations of `0..k` in lexicographic order.
fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..k).rev().find(|&j| cur[j] > cur[i]).expect("successor exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
}

/// Partial permutation p-value of `stat` for the responses of `ds`, using the
/// eigensystem of its (possibly whitened) kernel matrix.
///
/// Replicate 0 of the statistic is the observed value; replicates `1..=B`
/// use permuted responses.
pub fn run_test(ds: &Dataset, es: &EigenSystem, plan: &PermutationPlan, stat: &dyn Statistic) -> Result<TestReport> {
    let n = ds.n();
    plan.validate(n)?;
    let y = ds.y();
    let w = project_responses(es, y)?;
    let observed = checked(stat, y, 0)?;
    let mut warnings = Vec::new();
    let b = plan.b_n;
    let exhaustive = plan.is_exhaustive();

    let (permuted, p_value) = if b == 0 {
        warnings.push("permutation size is 0; p-value set to 1".to_string());
        (Vec::new(), 1.0)
    } else if exhaustive {
        let perms = all_permutations(b);
        let head = n - b;
        let permuted = perms
            .par_iter()
            .enumerate()
            .map(|(r, p)| {
                let mut wp = w.clone();
                for (k, &src) in p.iter().enumerate() {
                    wp[head + k] = w[head + src];
                }
                checked(stat, &es.reconstruct(&wp), r + 1)
            })
            .collect::<Result<Vec<f64>>>()?;
        let count = permuted.iter().filter(|&&t| exceeds(t, observed)).count();
        let p = count as f64 / permuted.len() as f64;
        (permuted, p)
    } else {
        let permuted = (0..plan.n_perm)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_rng(plan.seed, r as u64 + 1);
                let wp = match plan.mode {
                    Mode::Discrete => sample_discrete(&w, b, &mut rng),
                    Mode::Continuous => sample_continuous(&w, b, &mut rng),
                };
                checked(stat, &es.reconstruct(&wp), r + 1)
            })
            .collect::<Result<Vec<f64>>>()?;
        let p = pvalue_from(observed, &permuted);
        (permuted, p)
    };
    if b == 1 && plan.mode == Mode::Discrete {
        warnings.push("permutation size is 1; p-value is 1".to_string());
    }

    Ok(TestReport {
        statistic: observed,
        permuted,
        p_value,
        correction: None,
        alpha0: None,
        corrected_p_value: p_value,
        b_n: b,
        mode: plan.mode,
        n_perm: plan.n_perm,
        exhaustive,
        seed: plan.seed,
        kernel: None,
        nuisance: None,
        warnings,
    })
}

/// Add-one Monte-Carlo p-value `(1 + #{T_b ≥ T_obs}) / (B + 1)`.
pub fn pvalue_from(observed: f64, permuted: &[f64]) -> f64 {
    let count = permuted.iter().filter(|&&t| exceeds(t, observed)).count();
    (1 + count) as f64 / (permuted.len() + 1) as f64
}
