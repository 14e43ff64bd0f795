//! Diagonally quadratic BSDE systems: generator models and validators,
//! least-squares Monte Carlo solvers, Picard iteration with stitching, norm
//! estimators, closed-form oracles and the explicit bound constants.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod exprlang;
pub mod field;
pub mod generator;
pub mod norms;
pub mod oracle;
pub mod paths;
pub mod picard;
pub mod quadrature;
mod quasi;
pub mod regression;
pub mod scalar_solver;
pub mod stitcher;
