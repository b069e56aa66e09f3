//! 2D fluid–rigid-body interaction on a fixed reference annulus.
//!
//! A rigid disk moves through viscous incompressible fluid inside a
//! circular container, coupled through a Navier slip condition at the body
//! surface and no-slip at the wall. The moving geometry is handled by a
//! volume-preserving change of variables onto a fixed annulus; the solver
//! works entirely on the reference grid with metric-corrected operators.

pub mod config;
pub mod coupling;
pub mod error;
pub mod io;
pub mod grid;
pub mod rigid;
pub mod solver;
pub mod transform;
pub mod verify;

pub use error::{Error, Result};
