//! Particle approximation of mean field control problems with common noise.
//!
//! The pipeline runs from mollified coefficients through the n-particle
//! Bellman equation to a lifted value function on measures, with numerical
//! probes of the regularity and comparison machinery along the way.

pub mod bellman;
pub mod error;
pub mod lift;
pub mod measure;
pub mod mollify;
pub mod particle;
pub mod problem;
pub mod rng;
pub mod transport;
pub mod verdict;
pub mod viscosity;

pub use error::{Error, Result};
pub use measure::{DiscreteMeasure, MomentBall};
pub use problem::{benchmark, Coefficients, ProblemSpec};
pub use verdict::Verdict;

/// Library version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
