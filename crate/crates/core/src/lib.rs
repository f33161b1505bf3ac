//! Ground-Compose-Reinforce for Reward Machines.
//!
//! Propositions are grounded from a labelled trajectory dataset, composed
//! into approximate value functions for arbitrary Reward Machine tasks, and
//! used as shaping potentials for tabular RL over the product space.

pub mod agent;
pub mod cli;
pub mod compose;
pub mod geogrid;
pub mod ground;
pub mod logic;
pub mod rm;
