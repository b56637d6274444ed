//! Environment-free reinforcement learning on synthetic GUI-navigation MDPs.
//!
//! The crate is organized around a two-stage training scheme:
//!
//! 1. Collect offline trajectories in a simulated GUI environment, annotate
//!    every step with a binary action-quality label, and fit a value model
//!    `Q(s,a)` to those labels by MSE regression. The trained model is then
//!    frozen.
//! 2. Optimize a policy with clipped-surrogate (PPO-style) updates against
//!    the frozen value model, using only states from the offline dataset.
//!    The environment is never stepped during policy training.
//!
//! The [`theory`] module provides exact solvers (value iteration, policy
//! evaluation, occupancy measures) and verifies the suboptimality bound
//! `J(pi*) - J(pi_hat) <= c (eps + ||pi_hat - beta||)` empirically on
//! enumerable environments.
//!
//! See the `examples/` directory for runnable end-to-end walkthroughs, and
//! the `vem-rl` binary for the subcommand pipeline.

pub mod annotator;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod pipeline;
pub mod policy;
pub mod theory;
pub mod util;
pub mod vem;
