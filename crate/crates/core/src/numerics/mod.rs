//! Linear algebra, special functions and small optimizers.

pub mod eigen;
pub mod optim;
pub mod qp;
pub mod special;

pub use eigen::{eigendecompose_symmetric, inverse_sqrt_spd, EigenSystem, RANK_TOL};
pub use qp::{solve_nonneg_qp, QpProblem};
pub use special::{chi2_cdf, chi2_quantile, chi2_sf, f_cdf, f_sf};
