//! Simulation and learning stack for a cognitive-radio secondary user that
//! ships blockchain transactions over dynamically occupied primary channels.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: correlated primary-channel Markov chain and the agent's
//!   observation history.
//! - [`mempool`]: fee-binned mempool with stochastic arrivals and
//!   highest-fee block formation.
//! - [`attack`]: double-spend success probability and a Monte Carlo race.
//! - [`env`]: the per-slot decision process built from the three models.
//! - [`mdp`]: exact enumeration of tiny configurations and dynamic programming.
//! - [`nn`]: a small feedforward network with backpropagation and Adam.
//! - [`agents`]: tabular Q-learning and double deep Q-learning.
//! - [`harness`]: experiment configuration, training runs, sweeps and
//!   validation suites.

pub mod agents;
pub mod attack;
pub mod channel;
pub mod env;
mod error;
pub mod harness;
pub mod mdp;
pub mod mempool;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
