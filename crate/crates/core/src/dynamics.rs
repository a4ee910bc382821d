//! Control-affine system models and their numerical integration.
//!
//! A model evolves as `ẋ = f(x) + g(x) u`. The planar double integrator used
//! for the robot has state `(x, y, v_x, v_y)` and acceleration control
//! `(u_x, u_y)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("tracking gain must be positive and finite, got {0}")]
    InvalidGain(f64),
}

/// A system `ẋ = f(x) + g(x) u`.
pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// `f(x)`.
    fn drift(&self, state: &DVector<f64>) -> DVector<f64>;

    /// `g(x)`, a `state_dim × control_dim` matrix.
    fn actuation(&self, state: &DVector<f64>) -> DMatrix<f64>;

    fn derivative(&self, state: &DVector<f64>, control: &DVector<f64>) -> DVector<f64> {
        self.drift(state) + self.actuation(state) * control
    }
}

/// A control-affine model assembled from a pair of closures.
pub struct AffineModel<F, G> {
    drift: F,
    actuation: G,
    state_dim: usize,
    control_dim: usize,
}

impl<F, G> AffineModel<F, G>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    pub fn new(state_dim: usize, control_dim: usize, drift: F, actuation: G) -> Self {
        assert!(
            state_dim > 0 && control_dim > 0,
            "dimensions must be positive"
        );
        Self {
            drift,
            actuation,
            state_dim,
            control_dim,
        }
    }
}

impl<F, G> ControlAffine for AffineModel<F, G>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn drift(&self, state: &DVector<f64>) -> DVector<f64> {
        (self.drift)(state)
    }

    fn actuation(&self, state: &DVector<f64>) -> DMatrix<f64> {
        (self.actuation)(state)
    }
}

/// Planar double integrator: position integrates velocity, velocity
/// integrates the control.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DoubleIntegrator;

impl ControlAffine for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn drift(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[state[2], state[3], 0.0, 0.0])
    }

    fn actuation(&self, _state: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(4, 2);
        g[(2, 0)] = 1.0;
        g[(3, 1)] = 1.0;
        g
    }
}

/// Advances `state` by `dt` with `control` held constant, using the classical
/// fourth-order Runge-Kutta scheme.
pub fn step<M: ControlAffine + ?Sized>(
    model: &M,
    state: &DVector<f64>,
    control: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidTimeStep(dt));
    }
    if state.len() != model.state_dim() {
        return Err(DynamicsError::DimensionMismatch {
            what: "state",
            expected: model.state_dim(),
            got: state.len(),
        });
    }
    if control.len() != model.control_dim() {
        return Err(DynamicsError::DimensionMismatch {
            what: "control",
            expected: model.control_dim(),
            got: control.len(),
        });
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("state"));
    }
    if control.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }

    let k1 = model.derivative(state, control);
    let k2 = model.derivative(&(state + &k1 * (dt / 2.0)), control);
    let k3 = model.derivative(&(state + &k2 * (dt / 2.0)), control);
    let k4 = model.derivative(&(state + &k3 * dt), control);
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    if next.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("integrated state"));
    }
    Ok(next)
}

/// Position and velocity of the ego robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Vec2,
    pub velocity: Vec2,
}

impl RobotState {
    pub fn new(position: Vec2, velocity: Vec2) -> Self {
        Self { position, velocity }
    }

    pub fn at_rest(position: Vec2) -> Self {
        Self::new(position, Vec2::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.velocity.iter())
            .all(|v| v.is_finite())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
        ])
    }

    pub fn from_vector(state: &DVector<f64>) -> Result<Self, DynamicsError> {
        if state.len() != 4 {
            return Err(DynamicsError::DimensionMismatch {
                what: "robot state",
                expected: 4,
                got: state.len(),
            });
        }
        Ok(Self::new(
            Vec2::new(state[0], state[1]),
            Vec2::new(state[2], state[3]),
        ))
    }

    /// Integrates the double integrator under a constant acceleration.
    pub fn advance(&self, acceleration: Vec2, dt: f64) -> Result<Self, DynamicsError> {
        let control = DVector::from_column_slice(&[acceleration.x, acceleration.y]);
        let next = step(&DoubleIntegrator, &self.to_vector(), &control, dt)?;
        Self::from_vector(&next)
    }
}

/// Proportional velocity-tracking controller that turns a commanded velocity
/// into an acceleration: `u = -K_acc (v - v_cmd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingActuator {
    gain: f64,
}

impl TrackingActuator {
    pub fn new(gain: f64) -> Result<Self, DynamicsError> {
        if gain > 0.0 && gain.is_finite() {
            Ok(Self { gain })
        } else {
            Err(DynamicsError::InvalidGain(gain))
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn track_velocity(
        &self,
        current_velocity: Vec2,
        target_velocity: Vec2,
    ) -> Result<Vec2, DynamicsError> {
        if current_velocity.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("current velocity"));
        }
        if target_velocity.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("target velocity"));
        }
        Ok(-self.gain * (current_velocity - target_velocity))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn di_state(x: f64, y: f64, vx: f64, vy: f64) -> DVector<f64> {
        DVector::from_column_slice(&[x, y, vx, vy])
    }

    fn ctl(ux: f64, uy: f64) -> DVector<f64> {
        DVector::from_column_slice(&[ux, uy])
    }

    #[test]
    fn constant_velocity_drift() {
        let next = step(
            &DoubleIntegrator,
            &di_state(0.0, 0.0, 1.0, 0.0),
            &ctl(0.0, 0.0),
            1.0,
        )
        .unwrap();
        assert_eq!(next.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_acceleration_is_exact() {
        let next = step(
            &DoubleIntegrator,
            &di_state(0.0, 0.0, 0.0, 0.0),
            &ctl(2.0, 0.0),
            1.0,
        )
        .unwrap();
        assert_eq!(next.as_slice(), &[1.0, 0.0, 2.0, 0.0]);
    }

    // Oracle: explicit Euler sub-stepping with the closed-form position update,
    // which is exact for the double integrator regardless of step count.
    fn substepped(state: [f64; 4], u: [f64; 2], dt: f64, n: usize) -> [f64; 4] {
        let h = dt / n as f64;
        let [mut x, mut y, mut vx, mut vy] = state;
        for _ in 0..n {
            x += vx * h + 0.5 * u[0] * h * h;
            y += vy * h + 0.5 * u[1] * h * h;
            vx += u[0] * h;
            vy += u[1] * h;
        }
        [x, y, vx, vy]
    }

    #[test]
    fn matches_fine_step_oracle() {
        let dt = 0.0333;
        let next = step(
            &DoubleIntegrator,
            &di_state(1.0, 2.0, -1.0, 0.5),
            &ctl(0.3, -0.2),
            dt,
        )
        .unwrap();
        let oracle = substepped([1.0, 2.0, -1.0, 0.5], [0.3, -0.2], dt, 100);
        for (a, b) in next.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = di_state(0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            step(&DoubleIntegrator, &s, &ctl(f64::NAN, 0.0), 0.1),
            Err(DynamicsError::NonFinite("control"))
        );
        assert_eq!(
            step(
                &DoubleIntegrator,
                &di_state(f64::INFINITY, 0.0, 0.0, 0.0),
                &ctl(0.0, 0.0),
                0.1
            ),
            Err(DynamicsError::NonFinite("state"))
        );
        assert!(matches!(
            step(&DoubleIntegrator, &s, &ctl(0.0, 0.0), 0.0),
            Err(DynamicsError::InvalidTimeStep(_))
        ));
        assert!(matches!(
            step(&DoubleIntegrator, &s, &DVector::zeros(3), 0.1),
            Err(DynamicsError::DimensionMismatch {
                what: "control",
                ..
            })
        ));
    }

    #[test]
    fn closure_model_matches_double_integrator() {
        let model = AffineModel::new(
            4,
            2,
            |x: &DVector<f64>| DVector::from_column_slice(&[x[2], x[3], 0.0, 0.0]),
            |_: &DVector<f64>| DoubleIntegrator.actuation(&DVector::zeros(4)),
        );
        let s = di_state(0.5, -1.0, 2.0, 0.1);
        let u = ctl(-0.4, 0.9);
        assert_eq!(
            step(&model, &s, &u, 0.05).unwrap(),
            step(&DoubleIntegrator, &s, &u, 0.05).unwrap()
        );
    }

    #[test]
    fn nonlinear_model_converges_at_fourth_order() {
        // ẋ = -x + u on a scalar state, exact solution with constant u.
        let model = AffineModel::new(
            1,
            1,
            |x: &DVector<f64>| -x.clone(),
            |_: &DVector<f64>| DMatrix::from_element(1, 1, 1.0),
        );
        let x0 = DVector::from_element(1, 2.0);
        let u = DVector::from_element(1, 0.5);
        let exact = 0.5 + (2.0 - 0.5) * (-0.2f64).exp();
        let err = (step(&model, &x0, &u, 0.2).unwrap()[0] - exact).abs();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn tracking_examples() {
        let act = TrackingActuator::new(2.0).unwrap();
        assert_eq!(
            act.track_velocity(Vec2::new(1.0, 0.0), Vec2::new(1.0, 0.0))
                .unwrap(),
            Vec2::zeros()
        );
        assert_eq!(
            act.track_velocity(Vec2::zeros(), Vec2::new(1.0, -1.0))
                .unwrap(),
            Vec2::new(2.0, -2.0)
        );
        assert_eq!(
            act.track_velocity(Vec2::new(3.0, 4.0), Vec2::new(1.0, 1.0))
                .unwrap(),
            Vec2::new(-4.0, -6.0)
        );
        assert!(TrackingActuator::new(0.0).is_err());
        assert!(TrackingActuator::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn zero_control_drifts_linearly(
            x in -100.0..100.0f64, y in -100.0..100.0f64,
            vx in -10.0..10.0f64, vy in -10.0..10.0f64,
            steps in 1usize..20, dt in 0.001..0.5f64,
        ) {
            let mut s = RobotState::new(Vec2::new(x, y), Vec2::new(vx, vy));
            for _ in 0..steps {
                s = s.advance(Vec2::zeros(), dt).unwrap();
            }
            let t = steps as f64 * dt;
            let expected = Vec2::new(x + vx * t, y + vy * t);
            prop_assert!((s.position - expected).norm() < 1e-9 * (1.0 + expected.norm()));
            prop_assert_eq!(s.velocity, Vec2::new(vx, vy));
        }

        #[test]
        fn two_half_steps_equal_one_full_step(
            st in proptest::array::uniform4(-10.0..10.0f64),
            u in proptest::array::uniform2(-5.0..5.0f64),
            dt in 0.001..1.0f64,
        ) {
            let s = DVector::from_column_slice(&st);
            let c = DVector::from_column_slice(&u);
            let twice = step(&DoubleIntegrator, &step(&DoubleIntegrator, &s, &c, dt).unwrap(), &c, dt).unwrap();
            let once = step(&DoubleIntegrator, &s, &c, 2.0 * dt).unwrap();
            for (a, b) in twice.iter().zip(once.iter()) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn tracking_is_linear_and_zero_iff_equal(
            k in 0.1..10.0f64,
            a in proptest::array::uniform4(-10.0..10.0f64),
            b in proptest::array::uniform4(-10.0..10.0f64),
            c in -3.0..3.0f64,
        ) {
            let act = TrackingActuator::new(k).unwrap();
            let (v1, t1) = (Vec2::new(a[0], a[1]), Vec2::new(a[2], a[3]));
            let (v2, t2) = (Vec2::new(b[0], b[1]), Vec2::new(b[2], b[3]));
            let lhs = act.track_velocity(v1 + c * v2, t1 + c * t2).unwrap();
            let rhs = act.track_velocity(v1, t1).unwrap() + c * act.track_velocity(v2, t2).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-9);
            prop_assert_eq!(act.track_velocity(v1, v1).unwrap(), Vec2::zeros());
            if v1 != t1 {
                prop_assert!(act.track_velocity(v1, t1).unwrap() != Vec2::zeros());
            }
        }
    }
}
