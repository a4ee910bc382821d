//! The conformal calibration loop.
//!
//! After every sensing window the true agent trajectories are compared with
//! the predictions that were used to build the constraints. At each instant
//! and agent the *gap*
//!
//! ```text
//! gap = q̂_j + α(ĥ_j) + λ − q_j − α(h_j)
//! ```
//!
//! is how much looser the conformal constraint was than the true one
//! (positive: looser). The window loss is the largest squashed gap, and the
//! conformal variable moves as `λ ← λ + η (ε − loss)`.
//!
//! Unrolling the update gives `λ_{K+1} = λ_1 + η Σ (ε − l_k)`, so the average
//! loss equals `ε + (λ_1 − λ_{K+1}) / (η K)`. Whenever some `λ_safe` forces the
//! loss under `ε_safe ≤ ε`, `λ` can never fall below `λ_safe − η`, which bounds
//! the average loss by `ε + (λ_1 − λ_safe + η) / (η K)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{barrier_terms, BarrierError, BoundSet, ClassKappa, PotentialFieldCbf};
use crate::predictor::{differentiate, PredictorError, SampledTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("loss {0} is outside (-1/2, 1/2)")]
    LossOutOfRange(f64),
    #[error("target {0} is outside the range of the squashing function")]
    TargetOutOfRange(f64),
    #[error("learning rate must be nonnegative and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("initial lambda {lambda_initial} is below lambda_safe - eta = {floor}")]
    InitialLambdaTooLow { lambda_initial: f64, floor: f64 },
    #[error("risk bound needs 1 <= k' <= {recorded}, got {k_prime}")]
    InvalidHorizon { k_prime: usize, recorded: usize },
    #[error("risk bound needs a positive learning rate")]
    FrozenLearningRate,
    #[error("window mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Trajectory(#[from] PredictorError),
}

/// Odd, strictly increasing map of the reals onto `(-1/2, 1/2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Squashing {
    /// `r ↦ atan(r) / π`.
    #[default]
    ArctanOverPi,
    /// `r ↦ tanh(r) / 2`.
    HalfTanh,
}

impl Squashing {
    pub fn apply(&self, r: f64) -> f64 {
        // Both maps round to ±1/2 for large |r|; keep the result inside the
        // open interval.
        const EDGE: f64 = 0.5 - f64::EPSILON / 4.0;
        let y = match self {
            Self::ArctanOverPi => r.atan() / PI,
            Self::HalfTanh => 0.5 * r.tanh(),
        };
        y.clamp(-EDGE, EDGE)
    }

    pub fn inverse(&self, y: f64) -> Result<f64, ConformalError> {
        if !(y > -0.5 && y < 0.5) {
            return Err(ConformalError::TargetOutOfRange(y));
        }
        Ok(match self {
            Self::ArctanOverPi => (PI * y).tan(),
            Self::HalfTanh => (2.0 * y).atanh(),
        })
    }
}

/// Outcome of one sensing window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindowLoss {
    Value(f64),
    /// No agent was sensed, so there was nothing to compare.
    NoAgents,
}

impl WindowLoss {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Self::Value(v) => Some(v),
            Self::NoAgents => None,
        }
    }
}

/// `q̂_j + α(ĥ_j) + λ − q_j − α(h_j)`.
pub fn gap(true_terms: (f64, f64), predicted_terms: (f64, f64), lambda: f64) -> f64 {
    let (q, alpha_h) = true_terms;
    let (q_hat, alpha_h_hat) = predicted_terms;
    (q_hat - q) + (alpha_h_hat - alpha_h) + lambda
}

/// Everything the window loss needs besides the trajectories.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub cbf: &'a PotentialFieldCbf,
    pub alpha: &'a ClassKappa,
    pub squash: Squashing,
}

/// Largest squashed gap over all agents and all frames of the ego trajectory.
///
/// Agents are matched by id. Each agent is evaluated at the ego frames where
/// its true trajectory has a sample; the prediction must cover those frames.
/// Velocities come from finite differences over each trajectory's full span.
pub fn window_loss(
    predicted: &[SampledTrajectory],
    actual: &[SampledTrajectory],
    lambda: f64,
    ego: &SampledTrajectory,
    ctx: &LossContext<'_>,
) -> Result<WindowLoss, ConformalError> {
    let mut ids: Vec<_> = actual.iter().map(|t| t.agent_id).collect();
    let mut pred_ids: Vec<_> = predicted.iter().map(|t| t.agent_id).collect();
    ids.sort();
    pred_ids.sort();
    if ids != pred_ids {
        return Err(ConformalError::Mismatch(format!(
            "predicted agents {pred_ids:?} differ from actual agents {ids:?}"
        )));
    }
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(ConformalError::Mismatch("duplicate agent id".into()));
    }

    let mut worst: Option<f64> = None;
    for truth in actual {
        let pred = predicted
            .iter()
            .find(|p| p.agent_id == truth.agent_id)
            .expect("agent sets already matched");
        for t in [truth, pred] {
            if (t.dt - ego.dt).abs() > 1e-12 * ego.dt {
                return Err(ConformalError::Mismatch(format!(
                    "agent {} sampled every {} s, ego every {} s",
                    t.agent_id, t.dt, ego.dt
                )));
            }
        }
        for frame in ego.frames() {
            let Some(x_j) = truth.position_at(frame) else {
                continue;
            };
            let x_hat = pred.position_at(frame).ok_or_else(|| {
                ConformalError::Mismatch(format!(
                    "prediction for agent {} has no sample at frame {frame}",
                    truth.agent_id
                ))
            })?;
            let x_i = ego.position_at(frame).expect("frame from ego range");
            let true_terms =
                barrier_terms(ctx.cbf, ctx.alpha, x_i, x_j, differentiate(truth, frame)?)?;
            let pred_terms =
                barrier_terms(ctx.cbf, ctx.alpha, x_i, x_hat, differentiate(pred, frame)?)?;
            let g = gap(
                (true_terms.q_agent, true_terms.alpha_h),
                (pred_terms.q_agent, pred_terms.alpha_h),
                lambda,
            );
            let loss = ctx.squash.apply(g);
            worst = Some(worst.map_or(loss, |w: f64| w.max(loss)));
        }
    }
    Ok(worst.map_or(WindowLoss::NoAgents, WindowLoss::Value))
}

/// State of the conformal variable and its loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalState {
    pub lambda: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub lambda_initial: f64,
    pub loss_history: Vec<f64>,
    /// `λ_1, λ_2, …`, one entry more than `loss_history`.
    pub lambda_history: Vec<f64>,
    pub updates_applied: usize,
}

impl ConformalState {
    /// `eta = 0` freezes `λ` (the no-learning baseline).
    pub fn new(lambda_initial: f64, eta: f64, epsilon: f64) -> Result<Self, ConformalError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(ConformalError::InvalidLearningRate(eta));
        }
        if !(epsilon > -0.5 && epsilon < 0.5) {
            return Err(ConformalError::TargetOutOfRange(epsilon));
        }
        if !lambda_initial.is_finite() {
            return Err(ConformalError::Mismatch("non-finite initial lambda".into()));
        }
        Ok(Self {
            lambda: lambda_initial,
            eta,
            epsilon,
            lambda_initial,
            loss_history: Vec::new(),
            lambda_history: vec![lambda_initial],
            updates_applied: 0,
        })
    }

    /// Applies `λ ← λ + η (ε − loss)`. A no-agent window leaves everything
    /// untouched.
    pub fn update(&mut self, loss: WindowLoss) -> Result<(), ConformalError> {
        let WindowLoss::Value(l) = loss else {
            return Ok(());
        };
        if !(l > -0.5 && l < 0.5) {
            return Err(ConformalError::LossOutOfRange(l));
        }
        self.lambda += self.eta * (self.epsilon - l);
        self.loss_history.push(l);
        self.lambda_history.push(self.lambda);
        self.updates_applied += 1;
        Ok(())
    }

    /// `λ_1 + η Σ (ε − l_n)` recomputed from the loss history.
    pub fn unrolled_lambda(&self) -> f64 {
        self.lambda_initial
            + self.eta
                * self
                    .loss_history
                    .iter()
                    .map(|l| self.epsilon - l)
                    .sum::<f64>()
    }

    pub fn average_loss(&self) -> Option<f64> {
        if self.loss_history.is_empty() {
            None
        } else {
            Some(self.loss_history.iter().sum::<f64>() / self.loss_history.len() as f64)
        }
    }
}

pub fn update_lambda(
    mut state: ConformalState,
    loss: WindowLoss,
) -> Result<ConformalState, ConformalError> {
    state.update(loss)?;
    Ok(state)
}

/// `s⁻¹(ε_safe) − E_d − M_α M_h E_v`: every `λ` at or below this value keeps
/// the window loss at or below `ε_safe` for a predictor within the bounds.
pub fn lambda_safe_bound(
    bounds: &BoundSet,
    alpha: &ClassKappa,
    squash: Squashing,
    epsilon_safe: f64,
) -> Result<f64, ConformalError> {
    Ok(squash.inverse(epsilon_safe)? - bounds.e_d - alpha.lipschitz() * bounds.m_h * bounds.e_v)
}

/// A target loss with a conformal value that achieves it in a single window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyCertificate {
    pub epsilon_safe: f64,
    pub lambda_safe: f64,
    pub horizon: usize,
}

impl SafetyCertificate {
    pub fn from_bounds(
        bounds: &BoundSet,
        alpha: &ClassKappa,
        squash: Squashing,
        epsilon_safe: f64,
    ) -> Result<Self, ConformalError> {
        Ok(Self {
            epsilon_safe,
            lambda_safe: lambda_safe_bound(bounds, alpha, squash, epsilon_safe)?,
            horizon: 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskBound {
    pub average_loss: f64,
    pub bound: f64,
}

impl RiskBound {
    pub fn holds(&self) -> bool {
        self.average_loss <= self.bound
    }
}

/// Average of the first `k_prime` losses and the long-term risk bound
/// `ε + (λ_1 − λ_safe + η) / (η k')`.
pub fn risk_bound(
    state: &ConformalState,
    lambda_safe: f64,
    k_prime: usize,
) -> Result<RiskBound, ConformalError> {
    if state.eta <= 0.0 {
        return Err(ConformalError::FrozenLearningRate);
    }
    let recorded = state.loss_history.len();
    if k_prime == 0 || k_prime > recorded {
        return Err(ConformalError::InvalidHorizon { k_prime, recorded });
    }
    let floor = lambda_safe - state.eta;
    if state.lambda_initial < floor {
        return Err(ConformalError::InitialLambdaTooLow {
            lambda_initial: state.lambda_initial,
            floor,
        });
    }
    let k = k_prime as f64;
    let average_loss = state.loss_history[..k_prime].iter().sum::<f64>() / k;
    let bound = state.epsilon + (state.lambda_initial - lambda_safe + state.eta) / (state.eta * k);
    Ok(RiskBound {
        average_loss,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{AgentId, Vec2};
    use proptest::prelude::*;

    fn traj(id: u64, pts: Vec<Vec2>) -> SampledTrajectory {
        SampledTrajectory::new(AgentId(id), 0, 0.1, pts).unwrap()
    }

    fn line(id: u64, n: usize, origin: Vec2, step: Vec2) -> SampledTrajectory {
        traj(id, (0..n).map(|i| origin + step * i as f64).collect())
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap((0.4, 0.1), (0.4, 0.1), 0.0), 0.0);
        assert_eq!(gap((0.4, 0.1), (0.4, 0.1), 0.7), 0.7);
        assert!(gap((0.2, 0.3), (0.25, 0.35), -0.1).abs() < 1e-15);
    }

    #[test]
    fn squashing_properties() {
        for s in [Squashing::ArctanOverPi, Squashing::HalfTanh] {
            assert_eq!(s.apply(0.0), 0.0);
            for r in [-50.0, -1.0, -1e-3, 0.5, 3.0, 1e6, 1e300] {
                let y = s.apply(r);
                assert!(y > -0.5 && y < 0.5);
                assert_eq!(s.apply(-r), -y);
                if r.abs() < 10.0 {
                    assert!((s.inverse(y).unwrap() - r).abs() < 1e-9 * (1.0 + r.abs()));
                }
            }
            assert!(s.inverse(0.5).is_err());
        }
        assert!((Squashing::ArctanOverPi.apply(1.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn update_examples() {
        let mut s = ConformalState::new(0.0, 1.0, 0.0).unwrap();
        s.update(WindowLoss::Value(0.25)).unwrap();
        assert_eq!(s.lambda, -0.25);

        let s = ConformalState::new(0.5, 100.0, -0.1).unwrap();
        let s = update_lambda(s, WindowLoss::Value(-0.09252)).unwrap();
        assert!((s.lambda - -0.248).abs() < 1e-12, "{}", s.lambda);

        let before = s.clone();
        let s = update_lambda(s, WindowLoss::NoAgents).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn update_rejects_out_of_range_loss() {
        let mut s = ConformalState::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(
            s.update(WindowLoss::Value(0.5)),
            Err(ConformalError::LossOutOfRange(0.5))
        );
        assert!(s.loss_history.is_empty());
        assert!(ConformalState::new(0.0, 1.0, 0.5).is_err());
        assert!(ConformalState::new(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn lambda_safe_examples() {
        let lin = ClassKappa::linear(1.0).unwrap();
        let zero = BoundSet::new(3.0, 0.0, 0.0).unwrap();
        assert_eq!(
            lambda_safe_bound(&zero, &lin, Squashing::ArctanOverPi, 0.0).unwrap(),
            0.0
        );

        let b = BoundSet::new(2.0, 0.1, 0.3).unwrap();
        let v = lambda_safe_bound(&b, &lin, Squashing::ArctanOverPi, 0.25).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");

        let mut prev = f64::INFINITY;
        for e_d in [0.0, 1.0, 10.0, 1e3, 1e6] {
            let v = lambda_safe_bound(
                &BoundSet::new(2.0, 0.1, e_d).unwrap(),
                &lin,
                Squashing::ArctanOverPi,
                0.1,
            )
            .unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(lambda_safe_bound(&b, &lin, Squashing::ArctanOverPi, 0.6).is_err());

        let cert = SafetyCertificate::from_bounds(&b, &lin, Squashing::ArctanOverPi, 0.25).unwrap();
        assert_eq!(cert.horizon, 1);
        assert!(cert.lambda_safe <= 0.5 + 1e-12);
    }

    #[test]
    fn risk_bound_examples() {
        let mut s = ConformalState::new(0.0, 1.0, 0.0).unwrap();
        for _ in 0..10 {
            s.update(WindowLoss::Value(0.0)).unwrap();
        }
        let rb = risk_bound(&s, 0.0, 10).unwrap();
        assert!((rb.bound - 0.1).abs() < 1e-15);
        assert_eq!(rb.average_loss, 0.0);
        assert!(rb.holds());

        assert!(matches!(
            risk_bound(&s, 2.0, 10),
            Err(ConformalError::InitialLambdaTooLow { .. })
        ));
        assert!(matches!(
            risk_bound(&s, 0.0, 11),
            Err(ConformalError::InvalidHorizon { .. })
        ));
        assert!(matches!(
            risk_bound(&s, 0.0, 0),
            Err(ConformalError::InvalidHorizon { .. })
        ));
        let frozen = ConformalState::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            risk_bound(&frozen, 0.0, 1),
            Err(ConformalError::FrozenLearningRate)
        );
    }

    fn ctx_parts() -> (PotentialFieldCbf, ClassKappa) {
        (
            PotentialFieldCbf::new(2.0, 10.0, 0.5).unwrap(),
            ClassKappa::linear(1.0).unwrap(),
        )
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (cbf, alpha) = ctx_parts();
        let ctx = LossContext {
            cbf: &cbf,
            alpha: &alpha,
            squash: Squashing::ArctanOverPi,
        };
        let ego = line(0, 12, Vec2::zeros(), Vec2::new(0.1, 0.0));
        let agents = vec![
            line(1, 13, Vec2::new(3.0, 1.0), Vec2::new(-0.05, 0.02)),
            line(2, 13, Vec2::new(-2.0, -2.0), Vec2::new(0.03, 0.07)),
        ];
        assert_eq!(
            window_loss(&agents, &agents, 0.0, &ego, &ctx).unwrap(),
            WindowLoss::Value(0.0)
        );
        assert_eq!(
            window_loss(&[], &[], 0.0, &ego, &ctx).unwrap(),
            WindowLoss::NoAgents
        );
    }

    #[test]
    fn constant_gap_gives_quarter() {
        // Out of range everywhere: every gap equals λ.
        let (cbf, alpha) = ctx_parts();
        let ctx = LossContext {
            cbf: &cbf,
            alpha: &alpha,
            squash: Squashing::ArctanOverPi,
        };
        let ego = line(0, 6, Vec2::zeros(), Vec2::new(0.1, 0.0));
        let a = vec![line(1, 6, Vec2::new(50.0, 0.0), Vec2::new(0.1, 0.0))];
        let p = vec![line(1, 6, Vec2::new(60.0, 0.0), Vec2::new(-0.3, 0.1))];
        match window_loss(&p, &a, 1.0, &ego, &ctx).unwrap() {
            WindowLoss::Value(v) => assert!((v - 0.25).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_takes_max_over_agents() {
        // Both agents out of range so each gap is exactly its own offset via λ;
        // emulate different per-agent gaps by evaluating them separately.
        let (cbf, alpha) = ctx_parts();
        let ctx = LossContext {
            cbf: &cbf,
            alpha: &alpha,
            squash: Squashing::ArctanOverPi,
        };
        let ego = line(0, 5, Vec2::zeros(), Vec2::new(0.1, 0.0));
        let near_true = line(1, 5, Vec2::new(2.0, 0.0), Vec2::zeros());
        let near_pred = line(1, 5, Vec2::new(1.5, 0.0), Vec2::zeros());
        let far = line(2, 5, Vec2::new(40.0, 0.0), Vec2::zeros());
        let lambda = 0.3;
        let solo_near = window_loss(
            std::slice::from_ref(&near_pred),
            std::slice::from_ref(&near_true),
            lambda,
            &ego,
            &ctx,
        )
        .unwrap()
        .value()
        .unwrap();
        let solo_far = window_loss(
            std::slice::from_ref(&far),
            std::slice::from_ref(&far),
            lambda,
            &ego,
            &ctx,
        )
        .unwrap()
        .value()
        .unwrap();
        let both = window_loss(
            &[near_pred, far.clone()],
            &[near_true, far],
            lambda,
            &ego,
            &ctx,
        )
        .unwrap()
        .value()
        .unwrap();
        assert_eq!(both, solo_near.max(solo_far));
        assert!(
            solo_near < solo_far,
            "a prediction closer than reality tightens the constraint"
        );
    }

    #[test]
    fn mismatches_are_rejected() {
        let (cbf, alpha) = ctx_parts();
        let ctx = LossContext {
            cbf: &cbf,
            alpha: &alpha,
            squash: Squashing::ArctanOverPi,
        };
        let ego = line(0, 5, Vec2::zeros(), Vec2::new(0.1, 0.0));
        let a = line(1, 5, Vec2::new(3.0, 0.0), Vec2::zeros());
        let b = line(2, 5, Vec2::new(3.0, 0.0), Vec2::zeros());
        assert!(matches!(
            window_loss(std::slice::from_ref(&a), &[b], 0.0, &ego, &ctx),
            Err(ConformalError::Mismatch(_))
        ));
        let short = line(1, 3, Vec2::new(3.0, 0.0), Vec2::zeros());
        assert!(matches!(
            window_loss(&[short], std::slice::from_ref(&a), 0.0, &ego, &ctx),
            Err(ConformalError::Mismatch(_))
        ));
        let other_dt = SampledTrajectory::new(AgentId(1), 0, 0.2, a.positions.clone()).unwrap();
        assert!(matches!(
            window_loss(&[other_dt], &[a], 0.0, &ego, &ctx),
            Err(ConformalError::Mismatch(_))
        ));
    }

    #[test]
    fn gap_sign_predicts_true_constraint_violation() {
        // Tight on Ĉ_j: q_i = −q̂_j − α(ĥ_j) − λ. Then C_j's residual is −gap.
        let (cbf, alpha) = ctx_parts();
        let ego = Vec2::new(0.0, 0.0);
        for (k, lambda) in [(0, -0.2), (1, 0.0), (2, 0.15)] {
            let x_j = Vec2::new(2.0 + 0.3 * k as f64, 1.0);
            let x_hat = x_j + Vec2::new(0.4, -0.2 * k as f64);
            let t = barrier_terms(&cbf, &alpha, ego, x_j, Vec2::new(-0.5, 0.1)).unwrap();
            let p = barrier_terms(&cbf, &alpha, ego, x_hat, Vec2::new(-0.4, 0.0)).unwrap();
            let q_i = -p.q_agent - p.alpha_h - lambda;
            let true_residual = q_i + t.q_agent + t.alpha_h;
            let g = gap((t.q_agent, t.alpha_h), (p.q_agent, p.alpha_h), lambda);
            assert!((true_residual + g).abs() < 1e-12);
            assert_eq!(true_residual < 0.0, g > 0.0);
        }
    }

    proptest! {
        #[test]
        fn unrolled_identity_and_step_cap(
            lambda1 in -5.0..5.0f64,
            eta in 0.01..100.0f64,
            eps in -0.49..0.49f64,
            losses in proptest::collection::vec(-0.4999..0.4999f64, 1..200),
        ) {
            let mut s = ConformalState::new(lambda1, eta, eps).unwrap();
            for &l in &losses {
                let before = s.lambda;
                s.update(WindowLoss::Value(l)).unwrap();
                prop_assert!((s.lambda - before).abs() < eta);
            }
            prop_assert!((s.lambda - s.unrolled_lambda()).abs() <= 1e-9 * (1.0 + s.lambda.abs()));
        }

        #[test]
        fn loss_is_monotone_in_lambda(
            l1 in -3.0..3.0f64, dl in 0.001..3.0f64,
            ox in -1.0..1.0f64, oy in -1.0..1.0f64,
        ) {
            let (cbf, alpha) = ctx_parts();
            let ctx = LossContext { cbf: &cbf, alpha: &alpha, squash: Squashing::ArctanOverPi };
            let ego = line(0, 6, Vec2::zeros(), Vec2::new(0.1, 0.0));
            let truth = line(1, 7, Vec2::new(3.0, 1.0), Vec2::new(-0.05, 0.0));
            let pred = line(1, 7, Vec2::new(3.0 + ox, 1.0 + oy), Vec2::new(-0.04, 0.01));
            let a = window_loss(std::slice::from_ref(&pred), std::slice::from_ref(&truth), l1, &ego, &ctx).unwrap().value().unwrap();
            let b = window_loss(&[pred], &[truth], l1 + dl, &ego, &ctx).unwrap().value().unwrap();
            prop_assert!(a < b);
        }
    }
}
