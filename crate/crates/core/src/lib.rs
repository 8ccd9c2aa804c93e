//! Channel modelling, pilot training, channel estimation and Cramér-Rao
//! bounds for RIS-aided MIMO uplinks.
//!
//! The crate is organised bottom-up:
//!
//! * [`manifold`]: steering vectors, frequency grids, dictionaries.
//! * [`channel`]: geometric and correlated-Rayleigh channel synthesis, the
//!   composite (cascaded) channel, its covariance and element grouping.
//! * [`training`]: pilot and RIS schedules, the stacked measurement operator
//!   and noisy uplink simulation.
//! * [`unstructured`]: LS, LMMSE, low-rank LMMSE and the two-step
//!   common-channel estimator.
//! * [`geometric`]: AoA primitives and the decoupled two-stage estimator.
//! * [`crb`]: Fisher information and bounds for both model classes.
//! * [`harness`]: configuration-driven sweeps behind the `ris-sim` binary.

pub mod channel;
pub mod crb;
pub mod error;
pub mod geometric;
pub mod harness;
pub mod linalg;
pub mod manifold;
pub mod training;
pub mod unstructured;

pub use error::{Error, Result};
