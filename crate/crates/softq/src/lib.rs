//! Soft Q-learning pretrained with reward-free, imperfect demonstrations.
//!
//! The crate provides:
//! - finite MDPs, gridworld/layered builders and trajectory simulation ([`env`]),
//! - exact entropy-regularized policy/value math and oracles ([`soft`]),
//! - differentiable Q models with explicit backprop and a finite-difference
//!   oracle ([`model`]),
//! - the training gradients: soft Q-learning, decoupled demonstration
//!   gradients with a performance-constraint gate, and BC / DQfD-margin
//!   baselines ([`losses`]),
//! - replay buffer, reward-free demonstration datasets and generation ([`data`]),
//! - the end-to-end training loop ([`trainer`]),
//! - a numerical verification suite for every identity the training
//!   gradients rely on ([`verify`]),
//! - the command-line interface ([`cli`]).

pub mod cli;
pub mod data;
pub mod env;
pub mod error;
pub mod losses;
pub mod model;
pub mod soft;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
