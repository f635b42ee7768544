//! Stochastic decision horizons for constrained reinforcement learning.
//!
//! Constraint violations enter a decision problem through a state-action
//! continuation probability `alpha(s, a)`, which shapes rewards
//! (`r~ = alpha * r`) and discounts (`gamma~ = gamma * alpha`). This crate
//! provides the pieces needed to study that construction on small tabular
//! problems:
//!
//! * [`mdp`]: finite MDPs, toy environments and seeded rollouts.
//! * [`continuation`]: continuation models, schedules and the violation scaler.
//! * [`oracle`]: exact objectives, decision mass, survival statistics, chance
//!   certificates and gate-explicit Monte Carlo estimators.
//! * [`bellman`]: variable-discount evaluation operators and fixed points.
//! * [`replay`]: transition and compressed n-step replay.
//! * [`agents`]: tabular AS-SAC and VT-MPO learners with analytic gradients.

pub mod agents;
pub mod bellman;
pub mod continuation;
pub mod error;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod replay;
pub mod rng;

pub use error::{Result, SdhError};

/// Dense `[state][action]` table of reals.
pub type Table = Vec<Vec<f64>>;

/// Version string embedded in every persisted artifact.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
