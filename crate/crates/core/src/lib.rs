//! Numerical laboratory for weakly coupled lattices of piecewise expanding
//! interval maps.
//!
//! The crate is split along the objects it manipulates:
//!
//! * [`sitemap`]: single-site maps and their exact transfer operator on
//!   piecewise-constant densities.
//! * [`lattice`]: finite-torus coupled map lattice dynamics.
//! * [`observable`]: Lipschitz observables of finitely many sites, centering
//!   and Birkhoff sums.
//! * [`ensemble`]: ensemble simulation, Green–Kubo variance, CLT / LLT tests.
//! * [`spectral`]: Ulam discretizations, twisted operators and their leading
//!   eigenvalues.
//! * [`bvdiag`]: bounded-variation diagnostics on piecewise-constant densities.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Every random
//! stream is derived from a master seed and a work-item index (see [`rng`]), so
//! results never depend on the number of worker threads.

pub mod bvdiag;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod lattice;
pub mod observable;
pub mod rng;
pub mod sitemap;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use lattice::{Coupling, LatticeConfig, LatticeState};
pub use observable::Observable;
pub use sitemap::{PCDensity, SiteMap};
pub use spectral::UlamOperator;

pub use num_complex::Complex64;
