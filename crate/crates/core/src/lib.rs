//! Recursive discrete-time models of continuous-time systems measured under
//! band-limited conditions.

pub mod bounds;
pub mod cli;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lm;
pub mod metrics;
pub mod plant_sim;
pub mod signals;
pub mod sysid_linear;
pub mod sysid_pnlss;

pub use error::{Error, Result};
