//! Numerical schemes for decoupled forward-backward SDEs driven by a
//! Brownian motion and a single jump at a random time.
//!
//! The forward state follows a diffusion that is kicked by a jump
//! coefficient when the random time hits; the backward unknowns (Y, Z, U)
//! solve an equation whose generator sees the jump gap U before the jump.
//! The solution is handled by decomposition: a pre-jump Brownian system and
//! a family of post-jump Brownian systems indexed by the jump position,
//! recombined by indicators on the jump time. Both systems are discretized
//! with implicit backward Euler schemes on a time grid, conditional
//! expectations are realized either by least-squares Monte Carlo regression
//! or by Gauss-Hermite quadrature on a state mesh, and the convergence of
//! the squared errors at the expected first-order-in-mesh rate is measured
//! by the experiment harness.
//!
//! Modules:
//! - [`model`]: coefficients, jump-time densities, intensity, built-ins
//! - [`timegrid`]: the partition and its locate/mesh combinatorics
//! - [`rng`]: counter-based variates, reproducible across thread counts
//! - [`forward`]: Euler schemes for the pre- and post-jump states
//! - [`condexp`]: least-squares Monte Carlo regression layer
//! - [`backward`]: implicit schemes, coupling, recombination into (Y, Z, U)
//! - [`oracle`]: closed form and quadrature dynamic programming references
//! - [`harness`]: error functionals, grid sweeps, slope fits
//! - [`cli`]: config-driven batch runs with CSV and manifest outputs

pub mod backward;
pub mod cli;
pub mod condexp;
pub mod error;
pub mod forward;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod rng;
pub mod timegrid;

pub use error::{Error, Result};
