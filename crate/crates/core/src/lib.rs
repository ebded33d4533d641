//! Unrewarded-exploration GRPO for tabular policies.
//!
//! The crate has four layers:
//!
//! * [`prob`], [`waterfill`] and [`oracle`]: the statewise closed-form
//!   update `π* = min((1+ε)π_prop, τ·π_ref)` of the advantage-one clipped
//!   objective, plus independent brute-force verifiers of its properties.
//! * [`grpo`]: rewarded and unrewarded clipped surrogates with analytic
//!   gradients for softmax tables.
//! * [`maze`]: a small gridworld whose sparse action alphabet carries the
//!   latent-learning experiment.
//! * [`trainer`] and [`cli`]: training regimes, comparison reports and the
//!   command-line front end.

pub mod cli;
pub mod grpo;
pub mod maze;
pub mod oracle;
pub mod prob;
pub mod seeds;
pub mod trainer;
pub mod waterfill;
