//! Kinetic Fokker-Planck toolkit: closed-form fundamental solutions of the
//! free kinetic operator, Picard-constructed perturbed propagators, free-space
//! Poisson fields, and a self-consistent Vlasov-Poisson-Fokker-Planck solver
//! (deterministic phase-space grid scheme plus a stochastic particle oracle),
//! together with the quantitative diagnostics the accompanying experiments
//! verify: kernel mass and semigroup identities, weighted kernel bounds,
//! singular Gronwall iterations, velocity-moment propagation, and field-decay
//! fits.

pub mod diag;
pub mod error;
pub mod grid;
pub mod gronwall;
pub mod kernel;
pub mod linops;
pub mod params;
pub mod poisson;
pub mod quad;
pub mod solver;

pub use error::{Error, Result};
pub use params::{ModelParams, PhasePoint};
