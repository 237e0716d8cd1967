//! Simulation and verification toolkit for the two-dimensional relativistic
//! Vlasov–Maxwell system on the unit torus: spectral Maxwell evolution with
//! its large-`c` approximation, characteristics and magnetic bending,
//! geometric conditions on control sets, reference trajectories and the
//! absorption-based particle transport.

pub mod absorption;
pub mod characteristics;
pub mod control;
pub mod error;
pub mod experiments;
pub mod gcc;
pub mod geometry;
pub mod maxwell;
pub mod plan;
pub mod reference;
pub mod rescale;
pub mod spectral;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
