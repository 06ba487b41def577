//! Numerical laboratory for VT-harmonic map heat flow on chart families.
//!
//! The crate simulates the forward flow du/dt = tau(u) + du(V) + tr_g T(du,du)
//! and its backward counterpart on periodic structured grids, certifies the
//! geometric hypotheses behind the explicit gradient bounds (condition (C),
//! generalized regular balls, tensor smallness, super Ricci flow checks,
//! Muller quantities), evaluates the closed-form bounds, and verifies them
//! against measured flow data.

pub mod cutoff;
pub mod domain;
pub mod error;
pub mod estimate;
pub mod flow;
pub mod grid;
pub mod linalg;
pub mod pipeline;
pub mod reduced;
pub mod report;
pub mod scenario;
pub mod target;

pub use error::{Error, Result};
