//! Radial non-local Fisher-KPP equation `u_t = Δ_r u + K(t) u^p` on the unit
//! ball, `K(t) = 1 - σ ⨍ u^β`, with spiky initial data and blow-up diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod batch;
pub mod error;
pub mod grid;
pub mod initdata;
pub mod model;
pub mod operators;
pub mod quadrature;
pub mod solver;

pub use error::{Error, Result};
