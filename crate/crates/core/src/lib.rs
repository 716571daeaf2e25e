//! Non-negative matrix factorization with covariates and random effects.
//!
//! The model is `Y = X(ΘA + U) + E` with a non-negative basis `X` (columns
//! summing to one), non-negative covariate effects `Θ` and ridge-shrunk
//! unit-level random effects `U`. The crate provides the block-wise
//! estimator, degrees-of-freedom control of `U`, sandwich and one-step
//! multiplier-bootstrap inference for `Θ`, and a Monte Carlo harness.

pub mod complexity;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod linalg;
pub mod simulation;

pub use complexity::{calibrate_cap, df_u, enforce_cap, lambda_cap, CapCalibration, ComplexityDiagnostics};
pub use data::{
    expand_signed_covariate, load_dataset, orthodont, validate_params, write_dataset, DataSet,
    FitConfig, ModelParams, ParamViolation, WarmStart,
};
pub use error::{NmfreError, Result};
pub use estimator::{fit, init_covariate_nmf, objective, FitResult, ObjectiveTrace, TraceRecord};


pub use inference::{infer, CoefficientRow, InferenceConfig, InferenceReport, MultiplierDist, TestSide};
pub use simulation::{
    run_monte_carlo, run_stress_test, ErrorDist, MonteCarloSummary, Scenario, SimDesign,
};
