//! Dynamic unbalanced optimal transport on the cone over a spatial box:
//! weighted curves, their Wasserstein–Fisher–Rao energy, characteristics of
//! gridded velocity/growth fields, superposition of curve ensembles, and a
//! sparse conditional-gradient solver for dynamic inverse problems.

pub mod characteristics;
pub mod cone_space;
pub mod energy;
pub mod field_io;
pub mod inverse_solver;
mod optim;
pub mod superposition;

/// Library version, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
