//! Group-relative policy optimisation for small flow-matching models, with
//! singular stochastic rollouts and multi-granularity advantages.

pub mod autodiff;
pub mod engine;
pub mod flow_model;
pub mod grpo;
pub mod harness;
pub mod rewards;
pub mod rng;
pub mod samplers;
