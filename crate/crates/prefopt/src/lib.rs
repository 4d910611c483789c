//! Desk-scale laboratory for direct preference alignment.
//!
//! Implements DPO, iterative DPO, and the optimistic self-exploration (SELM)
//! objective over finite prompt/response spaces, together with simulated
//! preference oracles, goal-conditioned reward augmentation, exact regret
//! accounting, and verification oracles for the closed-form identities the
//! objectives rely on.

pub mod cli;
pub mod domain;
pub mod loops;
pub mod num;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod reward_augment;

pub use num::Real;

/// Concrete f64 instantiations of the generic core types.
pub type TabularPolicy = policy::TabularPolicy<f64>;
pub type LogLinearPolicy = policy::LogLinearPolicy<f64>;
pub type RewardFunction = policy::RewardFunction<f64>;
pub type FeatureMap = domain::FeatureMap<f64>;
pub type ObjectiveConfig = objectives::ObjectiveConfig<f64>;
pub type Environment = oracle::Environment<f64>;
