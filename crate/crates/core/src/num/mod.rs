//! Shared numeric plumbing: a derivative-free bounded optimizer and small
//! statistical helpers used across the fitters and analyses.

pub mod optim;
pub mod special;
