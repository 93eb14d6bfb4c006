//! Large-deviation L-functions and generalized gradient structures for
//! finite-state Markov chains and grid-discretized drift-diffusion.

pub mod convex;
pub mod diffusion;
pub mod error;
pub mod evolution;
pub mod gradient;
pub mod ldp;
pub mod markov;
pub mod sampling;
mod util;

pub use error::{Error, Result};
