//! Simulation and protocol library for a desk-scale free-space
//! entangled-photon link.
//!
//! The crate is organized bottom-up:
//!
//! - [`polarization`]: closed-form singlet measurement statistics with a
//!   two-basis visibility model; the analytic oracle for everything else.
//! - [`link`]: seeded Monte-Carlo generation of time-tagged detector
//!   events at two receivers (pair source, lossy arms, passive basis
//!   choice, background, jitter, sync pulses).
//! - [`coincidence`]: pulse-referenced coincidence matching, accidental
//!   rate estimation, and singles-normalized count matrices.
//! - [`bell`]: correlation/CHSH estimation with error propagation and
//!   polarization-fringe visibility scans.
//! - [`qkd`]: the entanglement-based BB84 pipeline run as a genuine
//!   two-party protocol over a message channel: sifting, QBER sampling,
//!   Cascade reconciliation, Toeplitz privacy amplification.

pub mod bell;
pub mod coincidence;
pub mod error;
pub mod link;
pub mod polarization;
pub mod qkd;
pub mod rng;

pub use error::{Error, Result};
