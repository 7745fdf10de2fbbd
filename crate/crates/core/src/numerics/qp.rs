//! Bound-constrained quadratic program used by Fisher-scoring steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{PptError, Result};

/// `min −scoreᵀ(τ − anchor) + ½ (τ − anchor)ᵀ F (τ − anchor)` subject to `τ ≥ 0`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub score: DVector<f64>,
    pub curvature: DMatrix<f64>,
    pub anchor: DVector<f64>,
}

impl QpProblem {
    fn linear_term(&self, f: &DMatrix<f64>) -> DVector<f64> {
        -&self.score - f * &self.anchor
    }

    pub fn objective(&self, tau: &DVector<f64>) -> f64 {
        let d = tau - &self.anchor;
        -self.score.dot(&d) + 0.5 * d.dot(&(&self.curvature * &d))
    }

    /// Gradient of the objective at `tau`.
    pub fn gradient(&self, tau: &DVector<f64>) -> DVector<f64> {
        &self.curvature * (tau - &self.anchor) - &self.score
    }

    /// Natural KKT residual `max_i |min(τ_i, ∇_i)|`.
    pub fn kkt_residual(&self, tau: &DVector<f64>) -> f64 {
        let g = self.gradient(tau);
        tau.iter()
            .zip(g.iter())
            .map(|(&t, &gi)| t.min(gi).abs().max((-t).max(0.0)))
            .fold(0.0, f64::max)
    }
}

const RIDGE: f64 = 1e-12;

/// Primal active-set solver.
pub fn solve_nonneg_qp(prob: &QpProblem) -> Result<DVector<f64>> {
    let j = prob.score.len();
    if prob.curvature.shape() != (j, j) || prob.anchor.len() != j {
        return Err(PptError::Dimension("QP component sizes disagree".into()));
    }
    let mut f = prob.curvature.clone();
    crate::numerics::eigen::symmetrize(&mut f);
    let trace = f.trace().abs().max(f64::MIN_POSITIVE);
    let min_eig = f.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-8 * trace {
        return Err(PptError::Qp(format!("curvature indefinite (eigenvalue {min_eig:e})")));
    }
    if min_eig < 1e-12 * trace {
        for i in 0..j {
            f[(i, i)] += RIDGE * trace.max(1.0);
        }
    }
    let c = prob.linear_term(&f);

    let mut x = prob.anchor.map(|v| v.max(0.0));
    let mut fixed: Vec<bool> = x.iter().map(|&v| v == 0.0).collect();
    for _ in 0..(50 * (j + 1)) {
        let free: Vec<usize> = (0..j).filter(|&i| !fixed[i]).collect();
        let grad = &f * &x + &c;
        let mut p = DVector::zeros(j);
        if !free.is_empty() {
            let ff = f.select_rows(&free).select_columns(&free);
            let rhs = -DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
            let sol = solve_spd(&ff, &rhs)?;
            for (k, &i) in free.iter().enumerate() {
                p[i] = sol[k];
            }
        }
        let scale = x.amax().max(1.0);
        if p.amax() <= 1e-14 * scale {
            let worst = (0..j)
                .filter(|&i| fixed[i])
                .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
            match worst {
                Some(i) if grad[i] < -1e-14 * grad.amax().max(1.0) => fixed[i] = false,
                _ => return Ok(polish(&f, &c, x, &fixed)),
            }
            continue;
        }
        let mut step = 1.0;
        let mut blocking = None;
        for &i in &free {
            if p[i] < 0.0 {
                let s = -x[i] / p[i];
                if s < step {
                    step = s;
                    blocking = Some(i);
                }
            }
        }
        x += p * step;
        if let Some(i) = blocking {
            x[i] = 0.0;
            fixed[i] = true;
        }
        x.apply(|v| *v = v.max(0.0));
    }
    Err(PptError::Qp("active-set iteration limit reached".into()))
}

fn polish(f: &DMatrix<f64>, c: &DVector<f64>, mut x: DVector<f64>, fixed: &[bool]) -> DVector<f64> {
    let free: Vec<usize> = (0..x.len()).filter(|&i| !fixed[i]).collect();
    if free.is_empty() {
        return x;
    }
    let ff = f.select_rows(&free).select_columns(&free);
    let fx: DVector<f64> = f.select_rows(&free) * &x;
    let rhs = -DVector::from_iterator(free.len(), free.iter().map(|&i| c[i])) - fx;
    if let Ok(delta) = solve_spd(&ff, &rhs) {
        for (k, &i) in free.iter().enumerate() {
            x[i] = (x[i] + delta[k]).max(0.0);
        }
    }
    x
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => a
            .clone()
            .lu()
            .solve(b)
            .ok_or_else(|| PptError::Qp("singular reduced curvature".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_d(target: f64) -> DVector<f64> {
        // (x − target)² = x² − 2·target·x + const, anchor 0
        let prob = QpProblem {
            score: DVector::from_element(1, 2.0 * target),
            curvature: DMatrix::from_element(1, 1, 2.0),
            anchor: DVector::zeros(1),
        };
        solve_nonneg_qp(&prob).unwrap()
    }

    #[test]
    fn one_dimensional_cases() {
        assert!((one_d(1.0)[0] - 1.0).abs() < 1e-14);
        assert_eq!(one_d(-1.0)[0], 0.0);
    }

    fn random_problem(rng: &mut ChaCha8Rng, j: usize) -> QpProblem {
        let a = DMatrix::from_fn(j, j, |_, _| rng.random::<f64>() - 0.5);
        QpProblem {
            score: DVector::from_fn(j, |_, _| 2.0 * rng.random::<f64>() - 1.0),
            curvature: &a * a.transpose() + DMatrix::identity(j, j) * 0.2,
            anchor: DVector::from_fn(j, |_, _| rng.random::<f64>()),
        }
    }

    fn projected_gradient(prob: &QpProblem) -> DVector<f64> {
        let l = prob.curvature.clone().symmetric_eigenvalues().max();
        let mut x = prob.anchor.map(|v| v.max(0.0));
        for _ in 0..100_000 {
            x = (&x - prob.gradient(&x) / l).map(|v| v.max(0.0));
        }
        x
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let prob = random_problem(&mut rng, 4);
            let x = solve_nonneg_qp(&prob).unwrap();
            let oracle = projected_gradient(&prob);
            assert!((&x - &oracle).amax() < 1e-6, "{x} vs {oracle}");
            assert!(prob.kkt_residual(&x) < 1e-10);
        }
    }

    #[test]
    fn complementary_slackness() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for j in 1..=8 {
            let prob = random_problem(&mut rng, j);
            let x = solve_nonneg_qp(&prob).unwrap();
            let g = prob.gradient(&x);
            for i in 0..j {
                assert!(x[i] >= 0.0);
                assert!(x[i] == 0.0 || g[i].abs() < 1e-8);
                assert!(x[i] > 0.0 || g[i] > -1e-8);
            }
        }
    }

    #[test]
    fn indefinite_curvature_is_error() {
        let prob = QpProblem {
            score: DVector::zeros(2),
            curvature: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            anchor: DVector::zeros(2),
        };
        assert!(solve_nonneg_qp(&prob).is_err());
    }
}
