//! Lyapunov certification of piecewise-affine plants in feedback with ReLU
//! network controllers.
//!
//! A learner proposes quadratic (or piecewise-quadratic) Lyapunov candidates as
//! analytic centers of a cut system; an exact branch-and-bound verifier either
//! certifies the decrease condition or returns the worst violating state, which
//! becomes the next cut.

pub mod accpm;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod learner;
pub mod lp;
pub mod qp_exact;
pub mod roa;
mod serde_util;
pub mod verifier;

pub use error::{Error, Result};
