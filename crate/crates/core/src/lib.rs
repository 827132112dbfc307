//! Energy-efficient resource allocation for the uplink of a synchronous
//! DS/CDMA network.
//!
//! Two allocation schemes are provided. [`equilibrium`] computes the Nash
//! equilibrium of the joint power, spreading-code, and receiver game with
//! full knowledge of the network. [`adaptive`] reaches the same operating
//! point from per-symbol observations only, combining an RLS receiver, a
//! per-user code update, and an LMS power controller. [`scenario`] generates
//! random cells and averages both schemes over independent realizations.

pub mod adaptive;
pub mod efficiency;
pub mod equilibrium;
pub mod error;
pub mod model;
pub mod scenario;
pub mod selftest;

pub use efficiency::{EfficiencyParams, solve_target_sinr};
pub use error::{Error, Result};
pub use model::{NetworkState, ReceiverBank};
pub use adaptive::{AdaptiveConfig, RealizationTrace};
pub use equilibrium::{EquilibriumConfig, EquilibriumResult};
pub use scenario::{ArrivalSpec, MonteCarloOptions, MonteCarloOutcome, Realization, ScenarioSpec, Trajectory};
