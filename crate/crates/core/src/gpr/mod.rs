//! Gaussian-process regression models and their variance-component fits.

pub mod models;
pub mod profile;
pub mod vcm;

pub use models::{fit_model, lr_statistic, GprContext, GprModel, GprModelSpec, NullPosterior, Vcm1Method};
pub use vcm::{
    fit_vcm1_em, fit_vcm2_em, fit_vcm2_newton, marginal_loglik, FitMethod, VcmFit, VcmSpec, VcmStructure,
};
