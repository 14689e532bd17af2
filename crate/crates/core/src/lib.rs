//! Ground-truth validation of neural-network attribution methods on
//! synthetic volumetric cohorts.
//!
//! The crate builds prediction targets whose causal signal source is known
//! by construction, trains small volumetric CNNs on them, generates
//! explanations with a suite of attribution methods, and scores the
//! explanations against the known ground truth.

pub mod attribution;
pub mod cidp;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod stats;
pub mod synthcohort;
pub mod volcore;

pub use error::{Error, Result};
