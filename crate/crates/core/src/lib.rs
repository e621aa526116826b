//! Tabular episodic-MDP toolkit for hybrid reinforcement learning.
//!
//! The crate is organised around a three-stage pipeline:
//!
//! 1. [`occupancy`]: reward-agnostic estimation of occupancy distributions for
//!    arbitrary policies, plus the thresholded offline density estimate in
//!    [`offline_density`].
//! 2. [`explore`] and [`imitate`]: Frank-Wolfe synthesis of the exploration
//!    mixture and the FTRL-driven imitation mixture.
//! 3. [`vilcb`]: pessimistic value iteration on the pooled data.
//!
//! [`pipeline`] stitches the stages together and also provides the pure-online
//! and pure-offline baselines; [`instance`] and [`sweep`] build test beds and
//! run experiment grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod explore;
pub mod imitate;
pub mod instance;
pub mod mdp;
pub mod occupancy;
pub mod offline_density;
pub mod pipeline;
pub mod seeding;
pub mod serde_util;
pub mod sweep;
pub mod vilcb;

pub use error::{Error, Result};
pub use mdp::{DeterministicPolicy, OccupancyTable, Policy, PolicyMixture, StochasticPolicy, TabularMdp};

/// Absolute tolerance used when validating probability vectors.
pub const PROB_TOL: f64 = 1e-9;
