//! Gaussian process emulation under monotonicity constraints.
//!
//! Derivative-sign information at chosen locations enters through a probit
//! link whose sharpness `τ` is raised step by step; a sequential Monte
//! Carlo sampler carries an ensemble of `(l, σ², y*, y')` states from the
//! unconstrained (`τ = 0`) posterior to the constrained one.

pub mod constraint;
pub mod design;
pub mod experiments;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod par;
pub mod scmc;

pub use constraint::{default_schedule, log_phi, log_probit, TauSchedule};
pub use gp::{Dataset, DerivativeBlock, DerivativeSpec, Direction, Hyperparameters, Model, Priors};
pub use kernel::KernelParams;
pub use par::Execution;
pub use scmc::{scmc_run, Ensemble, Particle, ScmcConfig};
