//! Bilevel reinforcement learning over entropy-regularized tabular MDPs.
//!
//! The lower level is a soft-optimal policy `pi*(x)` of an MDP whose reward
//! `r(x)` is parameterized; the upper level minimizes `phi(x) = f(x, pi*(x))`.
//! [`hypergrad`] computes exact and estimated hyper-gradients without
//! second-order information, [`solvers`] runs the model-based and model-free
//! outer loops, and [`verify`] turns the supporting inequalities into checks.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod hypergrad;
pub mod linalg;
pub mod mdp;
pub mod objectives;
pub mod reward;
pub mod rng;
pub mod soft;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};
