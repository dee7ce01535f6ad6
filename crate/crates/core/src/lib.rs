//! Deterministic simulation and analysis of multi-lane, multi-class traffic
//! as hybrid systems: a microscopic car-following model with timer-gated
//! lane changes, its mean-field particle approximation with an inter-lane
//! source term, and exact generalized Wasserstein distances to compare them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod meanfield;
pub mod measures;
pub mod micro;
pub mod numerics;
pub mod scenario;
pub mod transport;

pub use error::{Error, FieldError, Result, ValidationErrors};
pub use kernels::{ControlSchedule, Kernels, ModelParams};
pub use measures::{Atom, DensitySpec, ParticleCloud};
pub use transport::{gw11, gw_brute, w1, GroundMetric, TransportPlan};
