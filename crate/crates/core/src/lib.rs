//! Numerical toolkit for a nonlocal cell-cell adhesion model coupled to a
//! receptor-binding integral equation.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`]: interaction kernels `G±`, the adhesion potential `H` and
//!   convolution operators built from it.
//! * [`measures`]: grids, grid fields, discrete measures and the
//!   Kantorovich-Rubinstein distance.
//! * [`binding`]: the binding operator `Y`, its derivative, fixed-point solvers
//!   and the well-posedness certificate.
//! * [`pm_solver`]: explicit finite-volume solver for porous-medium diffusion
//!   with nonlocal drift.
//! * [`analysis`]: closed-form reference solutions and bound calculators.
//! * [`coupled`]: orchestration of the full coupled system.
//! * [`config`]: JSON configuration schema and validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod binding;
pub mod config;
pub mod coupled;
mod error;
pub mod geometry;
pub mod kernels;
pub mod measures;
pub mod pm_solver;

pub use error::{Error, Result};
pub use geometry::Point;
