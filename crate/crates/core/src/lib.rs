//! Fast solvers for 2D Stokes boundary integral equations under local
//! geometric changes.
//!
//! A hierarchically block separable (HBS) direct solver is built once for a
//! reference discretization. When panels are refined or holes are added, the
//! new system is embedded in an extended linear system whose inverse is
//! applied through a Woodbury formula with low-rank factors compressed by
//! interpolative decompositions.

pub mod els;
pub mod error;
pub mod geometry;
pub mod hbs;
pub mod kernels;
pub mod krylov;
pub mod linalg;
pub mod lowrank;
pub mod nystrom;
pub mod quadrature;

pub use error::{Error, Result};
