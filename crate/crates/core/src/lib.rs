//! Joint multitarget tracking and ionospheric virtual-height inference for
//! skywave over-the-horizon radar (OTHR).
//!
//! The crate estimates target kinematics, multipath data association and the
//! virtual ionospheric heights (VIHs) used for coordinate registration in one
//! expectation-conditional maximization (ECM) loop:
//!
//! * [`association`] gates OTHR returns and enumerates multitarget multipath
//!   association events (the E-step).
//! * [`estimation`] runs the stacked-mode filter on equivalent measurements and
//!   an unscented Rauch-Tung-Striebel smoother over a sliding window (first
//!   CM-step).
//! * [`vih`] turns radar and ionosonde evidence into canonical-form updates on a
//!   two-layer Gaussian Markov random field ([`gmrf`]) and solves it with loopy
//!   Gaussian belief propagation (second CM-step).
//! * [`ecm`] drives the iteration over a window and chains windows over a run.
//!
//! [`sim`] and [`experiment`] provide the synthetic scenario, Monte Carlo
//! harness and RMSE reporting. Runnable walkthroughs live in `examples/`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod config;
pub mod ecm;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod geometry;
pub mod gmrf;
pub mod ionosonde;
pub mod oracle;
pub mod sim;
pub mod vih;

pub use error::{Error, Result};
