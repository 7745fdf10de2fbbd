//! Kernel-based partial permutation tests for heterogeneous functional
//! relationships across groups.
//!
//! The usual entry point is [`run_pipeline`], which fits a kernel, picks a
//! permutation size, runs the permutation test and adds the finite-sample
//! correction. The building blocks are public for custom workflows.

pub mod correlated;
pub mod data;
pub mod error;
pub mod gpr;
pub mod kernels;
pub mod numerics;
pub mod permute;
pub mod pipeline;
pub mod sim;
pub mod sizing;
pub mod stats;

pub use correlated::{estimate_structured_rho, expand_covariance, run_test_correlated, whiten, CovarianceModel, Whitener};
pub use data::{group_index, load_dataset, standardize, Dataset, GroupIndex, StandardizationState};
pub use error::{PptError, Result};
pub use gpr::{fit_model, lr_statistic, GprModel, GprModelSpec, VcmFit, VcmSpec};
pub use kernels::{build_kernel_matrix, eval_kernel, feature_dimension, fit_kernel_params, KernelFamily, KernelSpec};
pub use numerics::{eigendecompose_symmetric, EigenSystem};
pub use permute::{run_test, Mode, PermutationPlan, Statistic, TestReport};
pub use pipeline::{run_pipeline, BnPolicy, KernelChoice, PipelineOutcome, TestConfig};
pub use sim::{generate, run_calibration, run_power, ScenarioSpec, StudyResult};
pub use sizing::{choose_b_n, SizingMode};
pub use stats::{build_statistic, f_statistic, StatisticName};
