//! Constrained maximum-likelihood reconstruction for positive linear models
//! `y = Hx`, with ISRA (Gaussian noise), EM (Poisson noise) and stopping
//! rules including the constrained backprojected residual (CBR).

// `!(x > 0.0)` is used on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod objectives;
pub mod operators;
pub mod simkit;
pub mod solvers;
pub mod stopping;

pub use error::{Error, Result};
pub use objectives::NoiseModel;
pub use operators::{DataVector, ForwardOperator, ImageVector};
pub use solvers::{Problem, ReconstructionResult, SolverKind, StopReason};
pub use stopping::{Criterion, RuleTrace, StoppingRule};
