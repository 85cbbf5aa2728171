//! Uncertainty-aware safe decision and control for unsignalized intersections.
//!
//! A risk-averse ensemble of distributional critics drives a squashed-Gaussian
//! actor; a truncated-Taylor barrier-function QP filters its commands and the
//! ensemble arbitrates between the raw and filtered command according to the
//! current joint uncertainty.

pub mod arbitration;
pub mod distrl;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod safety;
pub mod uncertainty;

pub use error::{Error, Result};
