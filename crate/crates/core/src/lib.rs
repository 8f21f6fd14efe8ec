//! Turns intelligent-tutoring-system step logs into difficulty-adjusted
//! response-time propensities and per-student learning parameters.
//!
//! The pipeline: raw transaction rows are ingested into a canonical step
//! table ([`ingest`]); a Gaussian mixed model on log response times with
//! crossed student and skill intercepts yields RT propensities ([`lmm`]);
//! a logistic mixed model on first-attempt correctness with per-student and
//! per-skill intercepts and opportunity slopes yields prior proficiency and
//! learning rates ([`iafm`]); downstream analyses cover slice-to-slice
//! stability, trait moderation with influence diagnostics, and within-slice
//! effects with false-discovery-rate control ([`analysis`]). A generative
//! mirror of both models supports end-to-end validation ([`simulate`]).

pub mod analysis;
pub mod error;
pub mod iafm;
pub mod ingest;
pub mod lmm;
pub mod num;
pub mod simulate;
pub mod solver;
pub mod types;

pub use error::{Error, ErrorKind, Result};
