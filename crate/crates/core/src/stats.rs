//! Test statistics: F statistic, group-MSE statistic, likelihood ratios.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupIndex};
use crate::error::{PptError, Result};
use crate::gpr::{GprContext, GprModel};
use crate::kernels::{explicit_features, KernelSpec};
use crate::numerics::{f_sf, EigenSystem, RANK_TOL};
use crate::permute::Statistic;

/// Explicit feature map of a finite-dimensional kernel.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    spec: KernelSpec,
}

impl FeatureMap {
    pub fn new(spec: &KernelSpec) -> Result<Self> {
        if explicit_features(spec, &[0.0]).is_none() {
            return Err(PptError::invalid("kernel has no finite feature map"));
        }
        Ok(FeatureMap { spec: spec.clone() })
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        explicit_features(&self.spec, x).expect("finite kernel")
    }

    /// `n × q` matrix of feature rows.
    pub fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = x
            .row_iter()
            .map(|r| self.features(&r.iter().copied().collect::<Vec<_>>()))
            .collect();
        let q = rows.first().map_or(0, |r| r.len());
        DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j])
    }
}

/// Block design `Φ ⊙ 1(Z = h)` for every group `h`.
pub fn group_design(pooled: &DMatrix<f64>, groups: &GroupIndex) -> DMatrix<f64> {
    let (n, q) = pooled.shape();
    let mut full = DMatrix::zeros(n, q * groups.n_groups());
    for (h, members) in groups.all().iter().enumerate() {
        for &i in members {
            for j in 0..q {
                full[(i, h * q + j)] = pooled[(i, j)];
            }
        }
    }
    full
}

/// Orthonormal basis of the column space via pivoted QR.
fn column_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 || a.nrows() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let top = r[(0, 0)].abs();
    let rank = if top == 0.0 {
        0
    } else {
        (0..r.nrows().min(r.ncols())).take_while(|&i| r[(i, i)].abs() > RANK_TOL * top).count()
    };
    qr.q().columns(0, rank).into_owned()
}

/// Residual projections onto the orthogonal complements of the pooled and
/// group-specific designs.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    q0: DMatrix<f64>,
    q1: DMatrix<f64>,
}

impl ProjectionPair {
    pub fn from_designs(pooled: &DMatrix<f64>, full: &DMatrix<f64>) -> Self {
        ProjectionPair { q0: column_basis(pooled), q1: column_basis(full) }
    }

    pub fn new(ds: &Dataset, fm: &FeatureMap) -> Self {
        let pooled = fm.design(ds.x());
        let full = group_design(&pooled, &ds.group_index());
        Self::from_designs(&pooled, &full)
    }

    pub fn p0(&self) -> usize {
        self.q0.ncols()
    }

    pub fn p1(&self) -> usize {
        self.q1.ncols()
    }

    fn residual(q: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        y - q * q.tr_mul(y)
    }

    /// `(I − P₀) y`
    pub fn residual0(&self, y: &DVector<f64>) -> DVector<f64> {
        Self::residual(&self.q0, y)
    }

    /// `(I − P₁) y`
    pub fn residual1(&self, y: &DVector<f64>) -> DVector<f64> {
        Self::residual(&self.q1, y)
    }

    pub fn f_value(&self, y: &DVector<f64>) -> Result<f64> {
        let n = y.len();
        let (p0, p1) = (self.p0(), self.p1());
        if p1 <= p0 {
            return Err(PptError::DesignsCoincide);
        }
        if p1 >= n {
            return Err(PptError::SaturatedModel);
        }
        let rss0 = self.residual0(y).norm_squared();
        let rss1 = self.residual1(y).norm_squared();
        if !(rss1 > 1e-24 * y.norm_squared()) {
            return Err(PptError::SaturatedModel);
        }
        Ok(((rss0 - rss1).max(0.0) / (p1 - p0) as f64) / (rss1 / (n - p1) as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FStatistic {
    pub f: f64,
    pub p0: usize,
    pub p1: usize,
}

pub fn f_statistic(ds: &Dataset, fm: &FeatureMap) -> Result<FStatistic> {
    let pp = ProjectionPair::new(ds, fm);
    Ok(FStatistic { f: pp.f_value(ds.y())?, p0: pp.p0(), p1: pp.p1() })
}

/// Classical F-test p-value `1 − F_{p₁−p₀, n−p₁}(F)`.
pub fn f_test(ds: &Dataset, fm: &FeatureMap) -> Result<(FStatistic, f64)> {
    let s = f_statistic(ds, fm)?;
    let p = f_sf((s.p1 - s.p0) as f64, (ds.n() - s.p1) as f64, s.f);
    Ok((s, p))
}

/// `n·ln MSE − Σ n_h·ln MSE_h` for pooled fitted values and per-group fitted
/// values (each in the row order of its group).
pub fn mse_statistic(y: &DVector<f64>, groups: &GroupIndex, pooled: &DVector<f64>, group_fits: &[DVector<f64>]) -> Result<f64> {
    let n = y.len() as f64;
    let mse = (y - pooled).norm_squared() / n;
    if !(mse > 0.0) {
        return Err(PptError::ZeroMse("pooled".into()));
    }
    let mut t = n * mse.ln();
    for (h, (members, fit)) in groups.all().iter().zip(group_fits).enumerate() {
        let nh = members.len() as f64;
        let sse: f64 = members.iter().zip(fit.iter()).map(|(&i, f)| (y[i] - f).powi(2)).sum();
        let mse_h = sse / nh;
        if !(mse_h > 0.0) {
            return Err(PptError::ZeroMse(format!("group {}", h + 1)));
        }
        t -= nh * mse_h.ln();
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatisticName {
    #[serde(rename = "f")]
    F,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "lr-h1")]
    LrH1,
    #[serde(rename = "lr-h1prime")]
    LrH1Prime,
    #[serde(rename = "lr-pseudo")]
    LrPseudo,
}

impl std::str::FromStr for StatisticName {
    type Err = PptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" | "f-stat" => Ok(StatisticName::F),
            "mse" => Ok(StatisticName::Mse),
            "lr-h1" => Ok(StatisticName::LrH1),
            "lr-h1prime" => Ok(StatisticName::LrH1Prime),
            "lr-pseudo" => Ok(StatisticName::LrPseudo),
            other => Err(PptError::UnknownStatistic(other.to_string())),
        }
    }
}

impl std::fmt::Display for StatisticName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StatisticName::F => "f",
            StatisticName::Mse => "mse",
            StatisticName::LrH1 => "lr-h1",
            StatisticName::LrH1Prime => "lr-h1prime",
            StatisticName::LrPseudo => "lr-pseudo",
        })
    }
}

/// Everything a statistic may depend on besides the response vector.
#[derive(Debug, Clone)]
pub struct StatisticContext {
    pub x: DMatrix<f64>,
    pub groups: GroupIndex,
    /// Un-jittered kernel matrix, whitened when `whitener` is set.
    pub kernel: DMatrix<f64>,
    pub eigen: Option<EigenSystem>,
    pub spec: KernelSpec,
    pub gamma: f64,
    /// `Σ^{-1/2}` applied to designs of the F statistic.
    pub whitener: Option<DMatrix<f64>>,
}

impl StatisticContext {
    pub fn gpr(&self) -> Result<GprContext> {
        match &self.eigen {
            Some(es) => GprContext::with_eigen(self.kernel.clone(), es.clone(), self.groups.clone(), self.spec.jitter, self.gamma),
            None => GprContext::new(self.kernel.clone(), self.groups.clone(), self.spec.jitter, self.gamma),
        }
    }
}

enum Built {
    F(ProjectionPair),
    Mse(GprContext),
    Lr(GprContext, GprModel),
}

struct NamedStatistic {
    built: Built,
    groups: GroupIndex,
}

impl Statistic for NamedStatistic {
    fn evaluate(&self, y: &DVector<f64>) -> Result<f64> {
        match &self.built {
            Built::F(pp) => pp.f_value(y),
            Built::Mse(ctx) => {
                let (pooled, groups) = ctx.pooled_and_group_means(y)?;
                mse_statistic(y, &self.groups, &pooled, &groups)
            }
            Built::Lr(ctx, alt) => ctx.lr_statistic(*alt, y),
        }
    }
}

/// Statistic callback for `name`; model-based statistics share one fitting
/// context across all replicates.
pub fn build_statistic(name: StatisticName, ctx: &StatisticContext) -> Result<Box<dyn Statistic + Send>> {
    let built = match name {
        StatisticName::F => {
            let fm = FeatureMap::new(&ctx.spec)
                .map_err(|_| PptError::invalid("the F statistic needs a finite-dimensional kernel"))?;
            let mut pooled = fm.design(&ctx.x);
            let mut full = group_design(&pooled, &ctx.groups);
            if let Some(w) = &ctx.whitener {
                pooled = w * pooled;
                full = w * full;
            }
            let pp = ProjectionPair::from_designs(&pooled, &full);
            if pp.p1() <= pp.p0() {
                return Err(PptError::DesignsCoincide);
            }
            if pp.p1() >= ctx.x.nrows() {
                return Err(PptError::SaturatedModel);
            }
            Built::F(pp)
        }
        StatisticName::Mse => Built::Mse(ctx.gpr()?),
        StatisticName::LrH1 => Built::Lr(ctx.gpr()?, GprModel::H1),
        StatisticName::LrH1Prime => Built::Lr(ctx.gpr()?, GprModel::H1Prime),
        StatisticName::LrPseudo => Built::Lr(ctx.gpr()?, GprModel::Pseudo),
    };
    Ok(Box::new(NamedStatistic { built, groups: ctx.groups.clone() }))
}

/// Wraps a user-supplied statistic of the response vector.
pub fn custom_statistic<F>(f: F) -> Box<dyn Statistic + Send>
where
    F: Fn(&DVector<f64>) -> Result<f64> + Sync + Send + 'static,
{
    Box::new(f)
}
