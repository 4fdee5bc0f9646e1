//! Rigid point-cloud registration driven by a coupled Wasserstein /
//! Gromov-Wasserstein transport solver.

pub mod bench;
pub mod costs;
pub mod error;
pub mod geometry;
pub mod otsolve;
pub mod pipeline;
pub mod pose;

pub use error::{Error, Result};
