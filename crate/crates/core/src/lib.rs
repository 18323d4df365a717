//! Traffic-state reconstruction on a ring road from sparse probe-vehicle
//! trajectories.
//!
//! The crate covers the whole workbench:
//!
//! * [`microsim`] generates ground truth and probe data with a first-order
//!   follow-the-leader model,
//! * [`fvm`] holds finite-volume reference solvers for the LWR and ARZ
//!   models,
//! * [`net`] and [`train`] implement the two-stage physics-informed fit
//!   (LWR with a learned equilibrium velocity, then ARZ),
//! * [`eval`] reconstructs dense fields and scores them.
//!
//! All internal quantities are normalized to `[0, 1]`; see [`Scales`].

pub mod config;
pub mod diagram;
pub mod error;
pub mod eval;
pub mod field;
pub mod fvm;
pub mod io;
pub mod metrics;
pub mod microsim;
pub mod net;
pub mod scales;
pub mod train;

pub use diagram::{greenshields_veq, lwr_flux, pressure, VeqChoice, VeqSpec, V_MAX};
pub use error::{Error, Result};
pub use field::GridField;
pub use metrics::relative_l2_error;
pub use scales::Scales;
