//! Small-time steering of the two-dimensional Boussinesq system on the torus
//! by controls supported in a horizontal band.

pub mod config;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod io;
pub mod linear_control;
pub mod localization;
pub mod solver;
pub mod spectral;
pub mod steering;
pub mod verify;

pub use error::{Error, Result};
