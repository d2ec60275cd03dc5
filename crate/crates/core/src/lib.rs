//! Variational mapping particle filter with interchangeable observation
//! gradient backends, plus a bootstrap (SIR) particle filter baseline.
//!
//! Particles are moved from a prior sample towards the posterior along the
//! kernelized steepest-descent direction of the KL divergence. The
//! log-likelihood gradient needs the Jacobian of the observation operator;
//! besides the analytic Jacobian this crate estimates it from operator
//! evaluations at the particles, either through a kernel embedding or
//! through ensemble perturbations.

// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod kernel;
pub mod mapping;
pub mod models;
pub mod obsgrad;
pub mod rng;

pub use ensemble::Ensemble;
pub use error::{Error, Result};
pub use kernel::{BandwidthPolicy, KernelConfig};
pub use mapping::{map_to_posterior, MappingConfig, MappingDiagnostics};
pub use models::{GradientBackend, LogPrior, ObservationModel, Operator, PriorSpec};
