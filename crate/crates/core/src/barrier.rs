//! Potential-field control barrier functions and the pairwise barrier
//! constraints built from them.
//!
//! For an ego position `x_i` and agent position `x_j` at distance `d`, the
//! barrier is `h = 1 / (1 + U_rep(d)) - δ` with the repulsive potential
//!
//! ```text
//! U_rep(d) = (K_rep / 2) (1/d - 1/ρ₀)²   for d < ρ₀
//!          = 0                          for d ≥ ρ₀
//! ```
//!
//! The barrier condition `∂h/∂x_i · v + ∂h/∂x_j · ẋ_j + α(h) ≥ 0` is affine in
//! the commanded ego velocity `v`, so it is returned as an [`AffineConstraint`]
//! with normal `∂h/∂x_i` and offset `q_j + α(h)`, where `q_j = ∂h/∂x_j · ẋ_j`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::qp::AffineConstraint;
use crate::{AgentId, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("ego and agent positions coincide; the repulsive potential is singular")]
    Singular,
    #[error("invalid barrier parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("non-finite input")]
    NonFinite,
}

/// Extended class-κ function applied to the barrier value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKappa {
    /// `α(r) = slope · r`.
    Linear { slope: f64 },
    /// `α(r) = scale · atan(r)`; bounded, Lipschitz with constant `scale`.
    Arctan { scale: f64 },
}

impl ClassKappa {
    pub fn linear(slope: f64) -> Result<Self, BarrierError> {
        positive("slope", slope)?;
        Ok(Self::Linear { slope })
    }

    pub fn arctan(scale: f64) -> Result<Self, BarrierError> {
        positive("scale", scale)?;
        Ok(Self::Arctan { scale })
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Self::Linear { slope } => slope * r,
            Self::Arctan { scale } => scale * r.atan(),
        }
    }

    /// Global Lipschitz constant `M_α`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Linear { slope } => slope,
            Self::Arctan { scale } => scale,
        }
    }
}

/// Position and velocity of another agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl AgentState {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        Self { position, velocity }
    }
}

/// Artificial-potential-field barrier `h = 1/(1 + U_rep) - δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialFieldCbf {
    k_rep: f64,
    rho0: f64,
    delta: f64,
}

impl PotentialFieldCbf {
    pub fn new(k_rep: f64, rho0: f64, delta: f64) -> Result<Self, BarrierError> {
        positive("k_rep", k_rep)?;
        positive("rho0", rho0)?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(BarrierError::InvalidParameter {
                name: "delta",
                value: delta,
            });
        }
        Ok(Self { k_rep, rho0, delta })
    }

    pub fn k_rep(&self) -> f64 {
        self.k_rep
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `U_rep` as a function of distance; zero outside the sensing range.
    pub fn repulsion(&self, distance: f64) -> f64 {
        if distance >= self.rho0 {
            return 0.0;
        }
        let s = 1.0 / distance - 1.0 / self.rho0;
        0.5 * self.k_rep * s * s
    }

    /// `h` as a function of distance.
    pub fn value_at_distance(&self, distance: f64) -> f64 {
        1.0 / (1.0 + self.repulsion(distance)) - self.delta
    }

    /// `dh/dd`, nonnegative on `(0, ∞)` and zero for `d ≥ ρ₀`.
    pub fn distance_derivative(&self, distance: f64) -> f64 {
        if distance >= self.rho0 {
            return 0.0;
        }
        let s = 1.0 / distance - 1.0 / self.rho0;
        let denom = 1.0 + 0.5 * self.k_rep * s * s;
        self.k_rep * s / (distance * distance * denom * denom)
    }

    pub fn value(&self, ego_position: Vec2, agent_position: Vec2) -> Result<f64, BarrierError> {
        let d = separation(ego_position, agent_position)?;
        Ok(self.value_at_distance(d))
    }

    /// Returns `(∂h/∂x_i, ∂h/∂x_j)`.
    pub fn gradient(
        &self,
        ego_position: Vec2,
        agent_position: Vec2,
    ) -> Result<(Vec2, Vec2), BarrierError> {
        let d = separation(ego_position, agent_position)?;
        let grad_ego = (ego_position - agent_position) * (self.distance_derivative(d) / d);
        Ok((grad_ego, -grad_ego))
    }

    /// Distance at which `h = 0`, i.e. `U_rep = 1/δ - 1`.
    pub fn collision_distance(&self) -> f64 {
        let level = 1.0 / self.delta - 1.0;
        1.0 / (1.0 / self.rho0 + (2.0 * level / self.k_rep).sqrt())
    }

    /// `M_h = sup_d |dh/dd|`, the bound on `‖∂h/∂x_j‖`.
    ///
    /// `dh/dd` vanishes at both ends of `(0, ρ₀]` and has a single interior
    /// peak, located by a log-spaced scan followed by golden-section search.
    pub fn max_agent_gradient(&self) -> f64 {
        const SCAN: usize = 4096;
        let lo = self.rho0 * 1e-9;
        let ratio = (self.rho0 / lo).ln();
        let at = |i: usize| lo * (ratio * i as f64 / SCAN as f64).exp();

        let best = (0..=SCAN)
            .max_by(|&a, &b| {
                self.distance_derivative(at(a))
                    .total_cmp(&self.distance_derivative(at(b)))
            })
            .unwrap_or(0);
        let mut a = at(best.saturating_sub(1));
        let mut b = at((best + 1).min(SCAN));

        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let f = |d: f64| self.distance_derivative(d);
        let mut c = b - inv_phi * (b - a);
        let mut e = a + inv_phi * (b - a);
        for _ in 0..200 {
            if (b - a) <= 1e-15 * b {
                break;
            }
            if f(c) > f(e) {
                b = e;
            } else {
                a = c;
            }
            c = b - inv_phi * (b - a);
            e = a + inv_phi * (b - a);
        }
        [a, b, c, e, at(best)]
            .into_iter()
            .map(f)
            .fold(0.0, f64::max)
    }
}

/// Bounds used by the safety guarantee: `M_h` on the agent-side gradient and
/// the predictor's value and dynamics error bounds `E_v`, `E_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSet {
    pub m_h: f64,
    pub e_v: f64,
    pub e_d: f64,
}

impl BoundSet {
    pub fn new(m_h: f64, e_v: f64, e_d: f64) -> Result<Self, BarrierError> {
        for (name, value) in [("m_h", m_h), ("e_v", e_v), ("e_d", e_d)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(BarrierError::InvalidParameter { name, value });
            }
        }
        Ok(Self { m_h, e_v, e_d })
    }
}

/// The pieces of one pairwise barrier condition evaluated at a single instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierTerms {
    /// `∂h/∂x_i`, the coefficient of the ego velocity.
    pub grad_ego: Vec2,
    /// `q_j = ∂h/∂x_j · ẋ_j`.
    pub q_agent: f64,
    /// `h(x_i, x_j)`.
    pub h: f64,
    /// `α(h)`.
    pub alpha_h: f64,
}

impl BarrierTerms {
    pub fn offset(&self) -> f64 {
        self.q_agent + self.alpha_h
    }
}

pub fn barrier_terms(
    cbf: &PotentialFieldCbf,
    alpha: &ClassKappa,
    ego_position: Vec2,
    agent_position: Vec2,
    agent_velocity: Vec2,
) -> Result<BarrierTerms, BarrierError> {
    if agent_velocity.iter().any(|v| !v.is_finite()) {
        return Err(BarrierError::NonFinite);
    }
    let h = cbf.value(ego_position, agent_position)?;
    let (grad_ego, grad_agent) = cbf.gradient(ego_position, agent_position)?;
    Ok(BarrierTerms {
        grad_ego,
        q_agent: grad_agent.dot(&agent_velocity),
        h,
        alpha_h: alpha.eval(h),
    })
}

/// The true barrier condition `C_j` as a half-space in commanded velocity.
pub fn build_true_constraint(
    cbf: &PotentialFieldCbf,
    alpha: &ClassKappa,
    ego_position: Vec2,
    agent_id: AgentId,
    agent: &AgentState,
) -> Result<AffineConstraint, BarrierError> {
    let terms = barrier_terms(cbf, alpha, ego_position, agent.position, agent.velocity)?;
    Ok(AffineConstraint::new(
        DVector::from_column_slice(terms.grad_ego.as_slice()),
        terms.offset(),
    )
    .with_agent(agent_id))
}

/// The conformal condition `Ĉ_j`: the barrier condition evaluated at the
/// predicted agent state, with the conformal variable `λ` added to the offset.
pub fn build_conformal_constraint(
    cbf: &PotentialFieldCbf,
    alpha: &ClassKappa,
    ego_position: Vec2,
    agent_id: AgentId,
    predicted: &AgentState,
    lambda: f64,
) -> Result<AffineConstraint, BarrierError> {
    if !lambda.is_finite() {
        return Err(BarrierError::NonFinite);
    }
    let mut c = build_true_constraint(cbf, alpha, ego_position, agent_id, predicted)?;
    c.offset += lambda;
    Ok(c)
}

fn separation(a: Vec2, b: Vec2) -> Result<f64, BarrierError> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(BarrierError::NonFinite);
    }
    let d = (a - b).norm();
    if d > 0.0 {
        Ok(d)
    } else {
        Err(BarrierError::Singular)
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), BarrierError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(BarrierError::InvalidParameter { name, value })
    }
}
