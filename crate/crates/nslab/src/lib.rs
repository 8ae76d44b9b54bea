//! A desk-scale numerical laboratory for stabilization and mixing of the
//! stochastically forced 2D Navier-Stokes system on the periodic box.
//!
//! The crate provides, bottom up:
//! - [`spectral`]: divergence-free Fourier Galerkin fields, Leray projection,
//!   Stokes ordering, and the advection convolution kernels;
//! - [`solver`]: semi-implicit time integration of the nonlinear, linearized,
//!   and discrete-adjoint systems on the unit time interval;
//! - [`noise`]: the space-time localized forcing dictionary, its sampling
//!   density, and spectral rendering;
//! - [`control`]: synthesis of the finite-dimensional feedback operator by
//!   penalized quadratic minimization, with contraction and observability
//!   certificates;
//! - [`coupling`]: the noise-shift map, exact density transport, maximal
//!   coupling, and the coupled Markov kernel;
//! - [`transport`]: discrete optimal transport (primal simplex + duals);
//! - [`mixing`]: seeded Monte-Carlo experiments (stabilization, recurrence,
//!   squeezing, mixing rate estimation);
//! - [`config`], [`io`], [`cli`]: configuration, persistence, dispatch.

pub mod cli;
pub mod config;
pub mod control;
pub mod coupling;
pub mod exec;
pub mod io;
pub mod mixing;
pub mod noise;
pub mod oracles;
pub mod solver;
pub mod spectral;
pub mod transport;
