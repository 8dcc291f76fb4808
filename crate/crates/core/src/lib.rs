//! Learning the Green's function of a parabolic initial/boundary-value
//! problem from forcing/solution pairs.
//!
//! The pipeline: partition the product of the space-time cylinder with itself
//! into a hierarchy of box pairs ([`geometry`]), probe the solution operator
//! with smooth Gaussian-process forcings ([`sampling`], [`solver`]), compress
//! each well-separated block with a randomized range sketch plus adjoint
//! projection ([`rsvd`]), and assemble the learned blocks into an evaluable
//! kernel approximation ([`learner`]). The [`theory`] module carries the
//! closed-form constants and inequality checkers that predict how much data
//! this needs, and [`oracle`] holds the analytic heat-kernel references that
//! the tests and experiments compare against.
//!
//! Everything is deterministic for a fixed master seed: random draws go
//! through counter-based substreams ([`rng`]) keyed by block and column ids,
//! so results are independent of thread count and scheduling.

pub mod error;
pub mod fitting;
pub mod geometry;
pub mod grid;
pub mod oracle;
pub mod rng;
pub mod rsvd;
pub mod sampling;
pub mod solver;
pub mod table;
pub mod learner;
pub mod theory;

pub use error::{Error, ErrorClass, Result};
