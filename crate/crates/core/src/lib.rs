//! Implicit fixed-point layers and their gradients.
//!
//! An equilibrium layer outputs the fixed point `h* = F(h* + u)`. This crate
//! provides the forward solvers, the exact implicit gradient, the cheap
//! "phantom" approximations (truncated unrolling and truncated Neumann
//! series), dense diagnostics that check when those approximations are
//! still ascent directions, a small SGD trainer and the experiment runners
//! behind the `phantom-grad` CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod densemath;
pub mod diagnostics;
pub mod eqmodule;
pub mod experiments;
pub mod fpsolvers;
pub mod gradoracles;
pub mod training;

pub use densemath::{Mat, Vector};
pub use eqmodule::{EqModule, ModuleKind};
pub use fpsolvers::{solve, FixedPointSolution, SolverMethod, SolverSpec};
pub use gradoracles::{GradMethod, GradOracleSpec, PhantomGradient};
