//! Simulation scenarios, residual truncation and study runners.

use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlated::CovarianceModel;
use crate::data::Dataset;
use crate::error::{PptError, Result};
use crate::permute::replicate_rng;
use crate::pipeline::{run_pipeline, PipelineOutcome, TestConfig};

/// Group and covariate balance cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    A,
    B,
    C,
    D,
    E,
}

impl Case {
    pub const ALL: [Case; 5] = [Case::A, Case::B, Case::C, Case::D, Case::E];

    /// `(p₁, p₂)` group probabilities.
    pub fn group_probs(self) -> [f64; 2] {
        match self {
            Case::A | Case::C | Case::E => [0.5, 0.5],
            Case::B | Case::D => [0.2, 0.8],
        }
    }

    /// `(a₁, a₂)` weight of `Unif(−1, 0)` in each group's covariate mixture.
    pub fn mixture_weights(self) -> [f64; 2] {
        match self {
            Case::A | Case::B => [0.5, 0.5],
            Case::C | Case::D => [0.8, 0.2],
            Case::E => [1.0, 0.0],
        }
    }
}

impl std::str::FromStr for Case {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Case::A),
            "b" => Ok(Case::B),
            "c" => Ok(Case::C),
            "d" => Ok(Case::D),
            "e" => Ok(Case::E),
            other => Err(PptError::invalid(format!("unknown case '{other}'"))),
        }
    }
}

/// Entry of a scenario's function menu, numbered (i) to (vi), or the
/// non-smooth function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionId {
    I,
    Ii,
    Iii,
    Iv,
    V,
    Vi,
    NonSmooth,
}

impl std::str::FromStr for FunctionId {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(FunctionId::I),
            "ii" | "2" => Ok(FunctionId::Ii),
            "iii" | "3" => Ok(FunctionId::Iii),
            "iv" | "4" => Ok(FunctionId::Iv),
            "v" | "5" => Ok(FunctionId::V),
            "vi" | "6" => Ok(FunctionId::Vi),
            "g0" | "nonsmooth" | "non-smooth" => Ok(FunctionId::NonSmooth),
            other => Err(PptError::invalid(format!("unknown function '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// `Unif(−√3, √3)`
    Uniform,
    /// Student t with 5 degrees of freedom.
    StudentT5,
}

impl std::str::FromStr for NoiseFamily {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "uniform" => Ok(NoiseFamily::Uniform),
            "t5" | "student-t5" | "student-t" => Ok(NoiseFamily::StudentT5),
            other => Err(PptError::invalid(format!("unknown noise family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// 1 to 6
    pub scenario: u8,
    pub case: Option<Case>,
    pub function: FunctionId,
    pub n: usize,
    pub sigma2: f64,
    /// Heterogeneity scale: group 2 uses `f₁ + δ(f₂ − f₁)`.
    pub delta: f64,
    pub noise: NoiseFamily,
    pub rho: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: u8, function: FunctionId, n: usize, sigma2: f64) -> Self {
        ScenarioSpec {
            scenario,
            case: None,
            function,
            n,
            sigma2,
            delta: 1.0,
            noise: NoiseFamily::Gaussian,
            rho: 0.0,
            seed: 0,
        }
    }

    pub fn with_case(mut self, case: Case) -> Self {
        self.case = Some(case);
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_noise(mut self, noise: NoiseFamily) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PptError::invalid(msg));
        if self.n < 4 {
            return bad(format!("scenario needs n ≥ 4, got {}", self.n));
        }
        if !(self.sigma2 >= 0.0) || !self.delta.is_finite() {
            return bad("noise variance must be ≥ 0 and δ finite".into());
        }
        use FunctionId::*;
        let f = self.function;
        let ok_fn = match self.scenario {
            1 | 2 => true,
            3 => matches!(f, I | Ii | Iii),
            4 => matches!(f, Iv | V | Vi),
            5 => matches!(f, I | Ii),
            6 => true,
            s => return bad(format!("unknown scenario {s}")),
        };
        if !ok_fn {
            return bad(format!("function {f:?} is not defined for scenario {}", self.scenario));
        }
        match (self.scenario, self.case) {
            (3 | 4, Some(Case::C | Case::D | Case::E)) => {
                return bad(format!("case {:?} varies covariates, which scenario {} fixes", self.case.unwrap(), self.scenario))
            }
            (5 | 6, Some(c)) => return bad(format!("case {c:?} does not apply to scenario {}", self.scenario)),
            _ => {}
        }
        if matches!(self.scenario, 5 | 6) && self.n % 2 != 0 {
            return bad("paired scenarios need an even n".into());
        }
        if self.scenario == 6 && self.rho.abs() >= 1.0 {
            return bad(format!("correlation {} must lie in (−1, 1)", self.rho));
        }
        Ok(())
    }

    /// Pairs `(i, n/2 + i)` of the paired scenarios.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n / 2).map(|i| (i, self.n / 2 + i)).collect()
    }

    pub fn covariance(&self) -> CovarianceModel {
        CovarianceModel::PairedEquicorrelated { pairs: self.pairs(), rho: self.rho }
    }
}

/// Continuous, piecewise-linear test function with range `[−1, 1]`.
pub fn nonsmooth_g0(x: f64) -> f64 {
    let t = 3.0 * x;
    let fl = t.floor();
    let frac = t - fl;
    let parity = (fl as i64).rem_euclid(2) as f64;
    2.0 * frac.abs().min((frac - 1.0).abs()) * (parity + 1.0) - 1.0
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `∫₀¹ sin(aπx)(1 − x) dx`
fn damped_sine_mean(a: f64) -> f64 {
    adaptive_simpson(&|x: f64| (a * PI * x).sin() * (1.0 - x), 0.0, 1.0, 1e-13)
}

/// Centering constants `(m₁, m₂, m₃)` of the paired-design functions.
pub fn centering_constants() -> [f64; 3] {
    static M: OnceLock<[f64; 3]> = OnceLock::new();
    *M.get_or_init(|| {
        let s3 = damped_sine_mean(3.0);
        [2.5 * s3, 3.5 * s3, 2.5 * damped_sine_mean(3.4)]
    })
}

fn damped_sine(amp: f64, freq: f64, x: f64) -> f64 {
    amp * (freq * PI * x).sin() * (1.0 - x)
}

/// Null-scenario function `f₀` for scenarios 1 and 2.
fn null_function(scenario: u8, f: FunctionId, x: &[f64]) -> f64 {
    use FunctionId::*;
    if scenario == 1 {
        let v = x[0];
        match f {
            I => v,
            Ii => 2.0 * v * v - 1.0,
            Iii => 4.0 * v.powi(3) / 3.0 - v / 3.0,
            Iv => 4.0 / (1.0 + v * v) - 3.0,
            V => (4.0 * v).sin(),
            Vi => (6.0 * v).sin(),
            NonSmooth => nonsmooth_g0(v),
        }
    } else {
        let (a, b) = (x[0], x[1]);
        match f {
            I => (a + b) / 2.0,
            Ii => a * b,
            Iii => 2.0 * (a + b).powi(3) / 15.0 - (a + b) / 30.0,
            Iv => 3.0 / (1.0 + a * a + b * b) - 2.0,
            V => (6.0 * a).sin() + b,
            Vi => (6.0 * a + 6.0 * b).sin(),
            NonSmooth => nonsmooth_g0(a) * nonsmooth_g0(b),
        }
    }
}

/// `(f₁, f₂)` of the alternative scenarios 3 to 5.
fn group_functions(scenario: u8, f: FunctionId, x: &[f64]) -> (f64, f64) {
    use FunctionId::*;
    match scenario {
        3 => {
            let v = x[0];
            match f {
                I => (1.0 + v, 2.0 + 3.0 * v),
                Ii => (1.0 / 3.0 + v / 2.0, (v + 1.0).powi(2) / 4.0),
                _ => (1.0 / 3.0 + v / 2.0, 0.2 + v / 2.0 - v.powi(4) + v * v),
            }
        }
        4 => {
            let (a, b) = (x[0], x[1]);
            match f {
                Iv => (1.0 + a + b, 2.0 + 3.0 * a + b),
                V => (1.0 / 3.0 + a / 2.0 + b / 2.0, (a + 1.0).powi(2) / 4.0 + (b + 1.0).powi(2) / 4.0 - 1.0 / 3.0),
                _ => {
                    let base = 1.0 / 3.0 + a / 2.0 + b / 2.0;
                    (base, base + (PI * a).sin() * (PI * b).sin())
                }
            }
        }
        _ => {
            let v = x[0];
            let m = centering_constants();
            let f1 = damped_sine(2.5, 3.0, v) - m[0];
            let f2 = match f {
                I => damped_sine(3.5, 3.0, v) - m[1],
                _ => damped_sine(2.5, 3.4, v) - m[2],
            };
            (f1, f2)
        }
    }
}

fn noise_draw(family: NoiseFamily, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        NoiseFamily::Gaussian => rng.sample(StandardNormal),
        NoiseFamily::Uniform => rng.random_range(-(3f64.sqrt())..3f64.sqrt()),
        NoiseFamily::StudentT5 => StudentT::new(5.0).expect("valid df").sample(rng),
    }
}

fn mixture_draw(a: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    if rng.random::<f64>() < a {
        u - 1.0
    } else {
        u
    }
}

/// One dataset drawn from the scenario.
pub fn generate(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;
    let sigma = spec.sigma2.sqrt();
    let d = if matches!(spec.scenario, 2 | 4) { 2 } else { 1 };
    let mut x = DMatrix::zeros(n, d);
    let mut z = vec![1i64; n];
    let mut y = DVector::zeros(n);
    match spec.scenario {
        1..=4 => {
            let case = spec.case.unwrap_or(Case::A);
            let p = case.group_probs();
            let a = case.mixture_weights();
            for i in 0..n {
                let g = if rng.random::<f64>() < p[0] { 0 } else { 1 };
                z[i] = g as i64 + 1;
                for k in 0..d {
                    x[(i, k)] = if spec.scenario <= 2 { mixture_draw(a[g], rng) } else { rng.random_range(-1.0..1.0) };
                }
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let mean = if spec.scenario <= 2 {
                    null_function(spec.scenario, spec.function, &row)
                } else {
                    let (f1, f2) = group_functions(spec.scenario, spec.function, &row);
                    if g == 0 {
                        f1
                    } else {
                        f1 + spec.delta * (f2 - f1)
                    }
                };
                y[i] = mean + sigma * noise_draw(spec.noise, rng);
            }
        }
        _ => {
            let half = n / 2;
            for i in 0..half {
                let v: f64 = rng.random();
                x[(i, 0)] = v;
                x[(half + i, 0)] = v;
                z[half + i] = 2;
            }
            let (c, s) = if spec.scenario == 6 {
                let r = spec.rho;
                (0.5 * ((1.0 + r).sqrt() + (1.0 - r).sqrt()), 0.5 * ((1.0 + r).sqrt() - (1.0 - r).sqrt()))
            } else {
                (1.0, 0.0)
            };
            for i in 0..half {
                let e1 = noise_draw(spec.noise, rng);
                let e2 = noise_draw(spec.noise, rng);
                let v = x[(i, 0)];
                let (m1, m2) = if spec.scenario == 6 {
                    let f = damped_sine(2.5, 3.0, v);
                    (f, f)
                } else {
                    let (f1, f2) = group_functions(5, spec.function, &[v]);
                    (f1, f1 + spec.delta * (f2 - f1))
                };
                // R_ρ^{1/2} = [[c, s], [s, c]]
                y[i] = m1 + sigma * (c * e1 + s * e2);
                y[half + i] = m2 + sigma * (s * e1 + c * e2);
            }
        }
    }
    Dataset::new(x, y, &z)
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Metadata of a residual truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationInfo {
    pub tail: f64,
    pub lower: f64,
    pub upper: f64,
    pub clamped: usize,
    pub quantile_rule: String,
}

/// Winsorizes residuals `y − f̂` at their `tail` and `1 − tail` type-7
/// sample quantiles and returns `f̂ + r`.
pub fn truncate_residuals(y: &DVector<f64>, fitted: &DVector<f64>, tail: f64) -> Result<(DVector<f64>, TruncationInfo)> {
    if !(0.0..0.5).contains(&tail) {
        return Err(PptError::invalid(format!("truncation tail {tail} outside [0, 0.5)")));
    }
    if y.len() != fitted.len() {
        return Err(PptError::Dimension("fitted values and responses differ in length".into()));
    }
    let r = y - fitted;
    let mut sorted: Vec<f64> = r.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lower = quantile_sorted(&sorted, tail);
    let upper = quantile_sorted(&sorted, 1.0 - tail);
    let mut out = y.clone();
    let mut clamped = 0;
    if tail > 0.0 {
        for i in 0..y.len() {
            if r[i] < lower {
                out[i] = fitted[i] + lower;
                clamped += 1;
            } else if r[i] > upper {
                out[i] = fitted[i] + upper;
                clamped += 1;
            }
        }
    }
    let info = TruncationInfo { tail, lower, upper, clamped, quantile_rule: "type-7 linear interpolation".into() };
    Ok((out, info))
}

/// Per-replicate outcomes of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub spec: ScenarioSpec,
    pub p_values: Vec<f64>,
    pub corrected_p_values: Vec<f64>,
    pub b_n: Vec<usize>,
    pub alphas: Vec<f64>,
    pub rejection: Vec<f64>,
    pub rejection_corrected: Vec<f64>,
    /// `(t, fraction of p-values ≤ t)` on a 0.01 grid.
    pub ecdf: Vec<(f64, f64)>,
    pub seconds: f64,
}

pub fn rejection_rate(p: &[f64], alpha: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter().filter(|&&v| v <= alpha).count() as f64 / p.len() as f64
}

pub fn ecdf_grid(p: &[f64]) -> Vec<(f64, f64)> {
    (0..=100).map(|k| {
        let t = k as f64 / 100.0;
        (t, rejection_rate(p, t))
    })
    .collect()
}

/// Kolmogorov–Smirnov distance of a sample to `Uniform(0, 1)`, with the
/// largest excursion above the diagonal (anti-conservative side).
pub fn ks_uniform(p: &[f64]) -> (f64, f64) {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let (mut two, mut above) = (0.0f64, 0.0f64);
    for (i, &v) in s.iter().enumerate() {
        let t = v.clamp(0.0, 1.0);
        let hi = (i + 1) as f64 / m - t;
        let lo = t - i as f64 / m;
        above = above.max(hi);
        two = two.max(hi).max(lo);
    }
    (two, above)
}

/// Runs `f` on `reps` independent datasets of the scenario. Replicate `r`
/// gets data stream `r` of `spec.seed` and a test seed derived from it.
pub fn run_replicates<T, F>(spec: &ScenarioSpec, reps: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Dataset, u64) -> Result<T> + Sync,
{
    spec.validate()?;
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(spec.seed, r as u64);
            let ds = generate(spec, &mut rng)?;
            let test_seed = rng.next_u64();
            f(&ds, test_seed).map_err(|e| PptError::Replicate { replicate: r, source: Box::new(e) })
        })
        .collect()
}

fn summarize(spec: &ScenarioSpec, outcomes: Vec<PipelineOutcome>, alphas: &[f64], seconds: f64) -> StudyResult {
    let p_values: Vec<f64> = outcomes.iter().map(|o| o.report.p_value).collect();
    let corrected_p_values: Vec<f64> = outcomes.iter().map(|o| o.report.corrected_p_value).collect();
    StudyResult {
        spec: spec.clone(),
        rejection: alphas.iter().map(|&a| rejection_rate(&p_values, a)).collect(),
        rejection_corrected: alphas.iter().map(|&a| rejection_rate(&corrected_p_values, a)).collect(),
        ecdf: ecdf_grid(&p_values),
        b_n: outcomes.iter().map(|o| o.report.b_n).collect(),
        alphas: alphas.to_vec(),
        p_values,
        corrected_p_values,
        seconds,
    }
}

/// Repeated generate-and-test runs for a null scenario.
pub fn run_calibration(spec: &ScenarioSpec, config: &TestConfig, reps: usize, alphas: &[f64]) -> Result<StudyResult> {
    let start = Instant::now();
    let outcomes = run_replicates(spec, reps, |ds, seed| {
        let cfg = TestConfig { seed, ..config.clone() };
        run_pipeline(ds, &cfg)
    })?;
    Ok(summarize(spec, outcomes, alphas, start.elapsed().as_secs_f64()))
}

/// One [`run_calibration`] study per grid point.
pub fn run_power(grid: &[ScenarioSpec], config: &TestConfig, reps: usize, alphas: &[f64]) -> Result<Vec<StudyResult>> {
    grid.iter().map(|s| run_calibration(s, config, reps, alphas)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g0_examples() {
        assert_eq!(nonsmooth_g0(0.0), -1.0);
        assert!(nonsmooth_g0(1.0 / 6.0).abs() < 1e-12);
        assert!((nonsmooth_g0(0.5) - 1.0).abs() < 1e-12);
        for k in -300..=300 {
            let v = nonsmooth_g0(k as f64 / 100.0);
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn centering_matches_closed_form() {
        let closed = |a: f64| 1.0 / (a * PI) - (a * PI).sin() / (a * PI).powi(2);
        let m = centering_constants();
        assert!((m[0] - 2.5 * closed(3.0)).abs() < 1e-10);
        assert!((m[1] - 3.5 * closed(3.0)).abs() < 1e-10);
        assert!((m[2] - 2.5 * closed(3.4)).abs() < 1e-10);
        for f in [FunctionId::I, FunctionId::Ii] {
            let (a, b) = (
                adaptive_simpson(&|x: f64| group_functions(5, f, &[x]).0, 0.0, 1.0, 1e-12),
                adaptive_simpson(&|x: f64| group_functions(5, f, &[x]).1, 0.0, 1.0, 1e-12),
            );
            assert!(a.abs() < 1e-6 && b.abs() < 1e-6);
        }
    }

    #[test]
    fn case_parameters() {
        assert_eq!(Case::B.group_probs(), [0.2, 0.8]);
        let spec = ScenarioSpec::new(1, FunctionId::I, 2000, 0.1).with_case(Case::B).with_seed(3);
        let ds = generate(&spec, &mut replicate_rng(1, 0)).unwrap();
        let frac = ds.groups().iter().filter(|&&g| g == 0).count() as f64 / 2000.0;
        assert!((frac - 0.2).abs() < 0.03);
        let spec = ScenarioSpec::new(1, FunctionId::I, 400, 0.1).with_case(Case::E);
        let ds = generate(&spec, &mut replicate_rng(2, 0)).unwrap();
        for (i, &g) in ds.groups().iter().enumerate() {
            let v = ds.x()[(i, 0)];
            assert!(if g == 0 { v < 0.0 && v > -1.0 } else { v > 0.0 && v < 1.0 });
        }
    }

    #[test]
    fn identity_function_mean() {
        assert_eq!(null_function(1, FunctionId::I, &[0.5]), 0.5);
        let spec = ScenarioSpec::new(1, FunctionId::I, 50, 0.0);
        let ds = generate(&spec, &mut replicate_rng(3, 0)).unwrap();
        assert!((ds.y() - ds.x().column(0)).amax() < 1e-15);
    }

    #[test]
    fn invalid_combinations() {
        let mut rng = replicate_rng(0, 0);
        assert!(generate(&ScenarioSpec::new(3, FunctionId::I, 50, 1.0).with_case(Case::E), &mut rng).is_err());
        assert!(generate(&ScenarioSpec::new(3, FunctionId::Iv, 50, 1.0), &mut rng).is_err());
        assert!(generate(&ScenarioSpec::new(5, FunctionId::I, 51, 1.0), &mut rng).is_err());
        assert!(generate(&ScenarioSpec::new(6, FunctionId::I, 50, 1.0).with_rho(1.0), &mut rng).is_err());
        assert!(generate(&ScenarioSpec::new(7, FunctionId::I, 50, 1.0), &mut rng).is_err());
    }

    #[test]
    fn paired_designs_duplicate_covariates() {
        for s in [5u8, 6] {
            let spec = ScenarioSpec::new(s, FunctionId::I, 40, 0.5).with_rho(-0.5);
            let ds = generate(&spec, &mut replicate_rng(4, 0)).unwrap();
            for i in 0..20 {
                assert_eq!(ds.x()[(i, 0)], ds.x()[(20 + i, 0)]);
                assert_eq!((ds.groups()[i], ds.groups()[20 + i]), (0, 1));
            }
        }
    }

    #[test]
    fn scenario6_noise_correlation() {
        let spec = ScenarioSpec::new(6, FunctionId::I, 20_000, 1.0).with_rho(-0.5);
        let ds = generate(&spec, &mut replicate_rng(5, 0)).unwrap();
        let half = 10_000;
        let r: Vec<f64> = (0..20_000).map(|i| ds.y()[i] - damped_sine(2.5, 3.0, ds.x()[(i, 0)])).collect();
        let c: f64 = (0..half).map(|i| r[i] * r[half + i]).sum::<f64>() / half as f64;
        let v: f64 = r.iter().map(|e| e * e).sum::<f64>() / 20_000.0;
        assert!((c / v + 0.5).abs() < 0.03 && (v - 1.0).abs() < 0.05);
    }

    #[test]
    fn noise_variances() {
        let mut rng = replicate_rng(6, 0);
        for fam in [NoiseFamily::Gaussian, NoiseFamily::Uniform] {
            let v: f64 = (0..200_000).map(|_| noise_draw(fam, &mut rng).powi(2)).sum::<f64>() / 200_000.0;
            assert!((v - 1.0).abs() < 0.02);
        }
        let u: Vec<f64> = (0..10_000).map(|_| noise_draw(NoiseFamily::Uniform, &mut rng)).collect();
        assert!(u.iter().all(|v| v.abs() <= 3f64.sqrt()));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::new(2, FunctionId::Vi, 30, 0.1).with_case(Case::D);
        let a = generate(&spec, &mut replicate_rng(7, 3)).unwrap();
        let b = generate(&spec, &mut replicate_rng(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_examples() {
        let y = DVector::from_vec(vec![-10.0, -1.0, 0.0, 1.0, 10.0]);
        let f = DVector::zeros(5);
        assert_eq!(truncate_residuals(&y, &f, 0.0).unwrap().0, y);
        let flat = DVector::from_element(5, 2.0);
        assert_eq!(truncate_residuals(&flat, &DVector::from_element(5, 1.0), 0.2).unwrap().0, flat);
        let (out, info) = truncate_residuals(&y, &f, 0.2).unwrap();
        // type-7: h = 0.8 → −10 + 0.8·9 = −2.8; symmetric upper
        assert!((info.lower + 2.8).abs() < 1e-12 && (info.upper - 2.8).abs() < 1e-12);
        assert_eq!(out.as_slice(), &[info.lower, -1.0, 0.0, 1.0, info.upper]);
        assert!(truncate_residuals(&y, &f, 0.5).is_err());
    }

    #[test]
    fn rates_and_ecdf() {
        let p = vec![0.01, 0.04, 0.2, 0.9];
        assert_eq!(rejection_rate(&p, 0.05), 0.5);
        let single = ecdf_grid(&[0.3]);
        assert_eq!(single[29].1, 0.0);
        assert_eq!(single[30].1, 1.0);
        assert!(single.iter().all(|&(_, v)| v == 0.0 || v == 1.0));
        let (ks, above) = ks_uniform(&[0.5]);
        assert!((ks - 0.5).abs() < 1e-12 && (above - 0.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn truncation_preserves_residual_order(r in prop::collection::vec(-50.0f64..50.0, 2..40), tail in 0.0f64..0.45) {
            let y = DVector::from_vec(r.clone());
            let f = DVector::zeros(r.len());
            let (out, _) = truncate_residuals(&y, &f, tail).unwrap();
            for i in 0..r.len() {
                for j in 0..r.len() {
                    if r[i] <= r[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }
    }
}
