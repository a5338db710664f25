//! Distance-decaying exposure effects with Dirichlet-process clustering of
//! subject-level effect curves.
//!
//! The outcome model is
//!
//! ```text
//! y_ij = x_ijᵀ γ + Σ_{d ∈ D_ij} f_{ζ_i}(d) + z_ijᵀ b_i + ε_ij,   ε_ij ~ N(0, σ² / w_ij)
//! ```
//!
//! where each `f_k` is a penalized B-spline curve, subjects share curves
//! through a truncated stick-breaking prior on cluster labels `ζ_i`, and
//! `b_i ~ N(0, Σ)` are subject random effects. Fitting is by blocked Gibbs
//! sampling ([`sampler`]); [`partition`] and [`diagnostics`] post-process
//! draws; [`simgen`] generates synthetic data and runs the simulation
//! studies; [`cli`] is the command-line front end.

pub mod basis;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod partition;
pub mod sampler;
pub mod seeding;
pub mod simgen;

pub use error::{Error, Result};
