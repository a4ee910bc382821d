//! Conformal control-barrier-function safety filtering.
//!
//! A robot with double-integrator dynamics tracks a goal while other agents
//! move around it. Their future motion comes from a black-box predictor, so
//! the pairwise barrier constraints are built from predictions and loosened or
//! tightened by a scalar conformal variable `λ`. After each sensing window the
//! true trajectories are revealed, the worst-case gap between the predicted
//! and true constraints is squashed into a loss, and `λ` moves against the
//! difference between that loss and a target `ε`.
//!
//! Module map:
//!
//! * [`dynamics`]: control-affine models, RK4 stepping, velocity tracking.
//! * [`barrier`]: the potential-field barrier and its constraints.
//! * [`qp`]: the projection QP used as the safety filter.
//! * [`conformal`]: loss, `λ` update and the risk-bound bookkeeping.
//! * [`predictor`]: sampled trajectories, predictors, finite differences.
//! * [`scenario`]: annotation ingestion, scripted scenes, the goal task.
//! * [`engine`]: the closed loop, metrics and parameter sweeps.
//! * [`report`]: CSV and trace output shared by the CLI.
//! * [`config`]: the flat TOML run configuration.

use serde::{Deserialize, Serialize};

pub mod barrier;
pub mod config;
pub mod conformal;
pub mod dynamics;
pub mod engine;
pub mod predictor;
pub mod qp;
pub mod report;
pub mod scenario;

/// Planar vector in scene units.
pub type Vec2 = nalgebra::Vector2<f64>;

/// Identifier of a tracked agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u64);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/barrier.md")]
    mod barrier {}
    #[doc = include_str!("../../../book/src/safety-filter.md")]
    mod safety_filter {}
    #[doc = include_str!("../../../book/src/conformal.md")]
    mod conformal {}
    #[doc = include_str!("../../../book/src/predictors.md")]
    mod predictors {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
}
