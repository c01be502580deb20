//! Augmented Lagrangian solvers for the linear-programming view of
//! discounted Markov decision processes.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`] finite MDPs, Bellman backups, rollouts and multi-step rewards.
//! * [`envs`] inventory control and chain environments.
//! * [`lp`] exact tabular machinery: value iteration, the weighted augmented
//!   Lagrangian, the classic ALM loop and KKT residuals.
//! * [`nets`] two-layer leaky-ReLU networks with hand-written gradients, Adam and
//!   the multiplier/slack heads.
//! * [`scal`] replay buffer, composite penalty objective, SCAL and the deep
//!   parameterized ALM.
//! * [`analysis`] numerical checks of the convergence lemmas and the
//!   gradient-variance ablation.
//! * [`runner`] experiment configuration and the `scal` command line driver.

pub mod analysis;
pub mod envs;
pub mod error;
pub mod lp;
pub mod mdp;
pub mod nets;
pub mod rng;
pub mod runner;
pub mod scal;

pub use error::{Error, Result};
