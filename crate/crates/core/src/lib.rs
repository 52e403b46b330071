//! Hyper-gradient estimation and single-loop solvers for bilevel problems
//!
//! A bilevel problem minimizes `f(λ) = F(λ, ω_λ)` where `ω_λ = argmin_ω G(λ, ω)`.
//! Problems expose first-order gradients plus Hessian-vector and
//! cross-derivative-vector products through [`BilevelOracle`]; everything
//! else in the crate is built from those products.
//!
//! - [`linalg`]: dense storage aliases, linear conjugate gradient, finite differences.
//! - [`problem`]: the oracle contract, sample keys, call counting, inner solves
//!   and derivative consistency checks.
//! - [`hypergrad`]: exact, unrolled (BP), Neumann-series (NS) and conjugate-gradient
//!   estimators, all expressed through one product-sum formulation with backward and
//!   forward recursions.
//! - [`solvers`]: the fully single-loop solver (FSLA) with a persistent `v` state and
//!   variance-reduced momentum, plus double-loop / warm-start baselines.
//! - [`problems`]: quadratic bilevel instances with closed-form ground truth, synthetic
//!   inner sequences and a logistic data hyper-cleaning task.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod problem;
pub mod problems;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use problem::{BilevelOracle, CountingOracle, OracleCalls, SampleKey};
