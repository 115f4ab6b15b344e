//! Safety index synthesis and adaptation for a parameter-varying extended
//! unicycle.
//!
//! The crate covers the full offline and closed-loop pipeline:
//!
//! - [`dynamics`]: the extended unicycle with identified input gains and drift.
//! - [`safety_index`]: the first-order safety index and its time derivative.
//! - [`sos`]: Gram matrices of the sum-of-squares refutation and their
//!   principal minors.
//! - [`synthesis`]: determinant gradient ascent for synthesis and adaptation.
//! - [`controller`]: LQR nominal control, bang-bang worst case and the QP
//!   safety filter.
//! - [`feasibility`]: sampled forward-invariance / finite-time-convergence checks.
//! - [`sysid`]: parameter identification from trajectory logs.
//! - [`sim`]: obstacle-course simulation and output files.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod feasibility;
pub mod riccati;
pub mod safety_index;
pub mod sim;
pub mod sos;
pub mod synthesis;
pub mod sysid;
