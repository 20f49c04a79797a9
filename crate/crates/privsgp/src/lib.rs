//! PrivSGP-VR: differentially private decentralized stochastic optimization
//! over time-varying directed graphs, simulated in lockstep.
//!
//! The library is organized around the phases of the algorithm:
//!
//! - [`topology`]: directed graph schedules and column-stochastic mixing matrices
//! - [`pushsum`]: per-node (x, w, z) push-sum state and the mix/de-bias steps
//! - [`varred`]: SAGA-style per-node gradient tables and corrected gradients
//! - [`privacy`]: clipping, Gaussian noise, moments-accountant bookkeeping and
//!   the optimal-iteration planner
//! - [`problems`]: losses with analytic per-sample gradients, data partitioning
//!   and problem-constant estimation
//! - [`engine`]: the lockstep iteration loop and metrics
//! - [`config`] / [`recipes`]: run configuration and experiment sweeps

pub mod config;
pub mod engine;
pub mod privacy;
pub mod problems;
pub mod pushsum;
pub mod recipes;
pub mod rng;
pub mod topology;
pub mod varred;
