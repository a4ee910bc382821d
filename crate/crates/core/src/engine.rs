//! The closed loop: predict, constrain, filter, track, integrate, and update
//! `λ` once per sensing window.
//!
//! Window `k` starts at frame `t_k = first + kτ`. At `t_k` the robot senses the
//! agents within `ρ_0`, asks the predictor for their positions over the next
//! `max(horizon, τ+1)` frames, and then runs `τ` control frames with those
//! predictions and the current `λ`. When the window closes the recorded
//! positions of the same agents over `t_k..=t_k+τ` are compared with the
//! predictions along the robot's realized path, and `λ` is updated.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{
    build_conformal_constraint, build_true_constraint, AgentState, BarrierError, ClassKappa,
    PotentialFieldCbf,
};
use crate::conformal::{
    window_loss, ConformalError, ConformalState, LossContext, Squashing, WindowLoss,
};
use crate::dynamics::{RobotState, TrackingActuator};
use crate::predictor::{
    differentiate, PredictionRequest, Predictor, PredictorKind, SampledTrajectory,
};
use crate::qp::{solve_with_relaxation, QpError, QpProblem};
use crate::scenario::{RobotTask, ScenarioFrameSet};
use crate::{AgentId, Vec2};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unusable scene: {0}")]
    Scene(String),
    #[error(
        "safety filter infeasible at frame {frame} after inflating offsets by {inflation}: \
         lambda = {lambda}, position = ({px}, {py}), velocity = ({vx}, {vy}), {constraints} constraints",
        px = state.position.x, py = state.position.y, vx = state.velocity.x, vy = state.velocity.y
    )]
    Infeasible {
        frame: i64,
        lambda: f64,
        state: RobotState,
        constraints: usize,
        inflation: f64,
    },
    #[error("numerical failure at frame {frame}: {message}")]
    Numerical { frame: i64, message: String },
}

impl RunError {
    /// Process exit code for this failure category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Scene(_) => 3,
            Self::Infeasible { .. } | Self::Numerical { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Seconds per frame; must match the scene's frame rate.
    pub dt: f64,
    /// Sensing window length in frames.
    pub tau_frames: usize,
    pub alpha_slope: f64,
    pub k_acc: f64,
    pub k_rep: f64,
    /// Attractive gain; replaces the task's own gain during a run.
    pub k_att: f64,
    pub rho0: f64,
    pub delta: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub lambda_initial: f64,
    pub predictor: PredictorKind,
    pub seed: u64,
    pub max_frames: usize,
    pub horizon_frames: usize,
    /// Distance below which a frame counts as a collision. Defaults to the
    /// distance where the barrier crosses zero.
    pub collision_distance: Option<f64>,
    pub relaxation_steps: usize,
    pub squash: Squashing,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            tau_frames: 12,
            alpha_slope: 0.1,
            k_acc: 2.0,
            k_rep: 20.0,
            k_att: 1.0,
            rho0: 400.0,
            delta: 0.5,
            eta: 100.0,
            epsilon: 0.0,
            lambda_initial: 0.0,
            predictor: PredictorKind::ConstantVelocity,
            seed: 0,
            max_frames: 100_000,
            horizon_frames: 40,
            collision_distance: None,
            relaxation_steps: 8,
            squash: Squashing::ArctanOverPi,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.tau_frames < 1 {
            return bad("tau_frames must be at least 1".into());
        }
        for (name, v) in [
            ("alpha_slope", self.alpha_slope),
            ("k_acc", self.k_acc),
            ("k_rep", self.k_rep),
            ("k_att", self.k_att),
            ("rho0", self.rho0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must be in (0, 1), got {}", self.delta));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if !(self.epsilon > -0.5 && self.epsilon < 0.5) {
            return bad(format!(
                "epsilon must be in (-1/2, 1/2), got {}",
                self.epsilon
            ));
        }
        if !self.lambda_initial.is_finite() {
            return bad("lambda_initial must be finite".into());
        }
        if let Some(d) = self.collision_distance {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("collision_distance must be nonnegative, got {d}"));
            }
        }
        if let PredictorKind::NoiseBoundedOracle { e_v, e_d } = self.predictor {
            if !(e_v >= 0.0 && e_d >= 0.0 && e_v.is_finite() && e_d.is_finite()) {
                return bad("noise bounds must be nonnegative".into());
            }
        }
        Ok(())
    }

    pub fn barrier(&self) -> Result<PotentialFieldCbf, RunError> {
        PotentialFieldCbf::new(self.k_rep, self.rho0, self.delta)
            .map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn class_kappa(&self) -> Result<ClassKappa, RunError> {
        ClassKappa::linear(self.alpha_slope).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Offset added per relaxation step: `η (1/2 − ε)`, the most `λ` can grow
    /// in one update. With `η = 0` the step is `1/2 − ε`.
    pub fn relaxation_step(&self) -> f64 {
        let room = 0.5 - self.epsilon;
        if self.eta > 0.0 {
            self.eta * room
        } else {
            room
        }
    }

    pub fn prediction_horizon(&self) -> usize {
        self.horizon_frames.max(self.tau_frames + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Unconstrained,
    Solved,
    Relaxed,
}

/// One line of the per-frame trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: i64,
    pub window: usize,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub commanded: [f64; 2],
    pub lambda: f64,
    pub constraints: usize,
    pub qp_status: QpStatus,
    pub inflation: f64,
    /// `‖v − v_cmd‖` before the tracking step.
    pub tracking_error: f64,
    /// Smallest residual of the true barrier conditions at the commanded
    /// velocity, over the agents that were predicted for this window.
    pub true_margin: Option<f64>,
    /// Distance to the nearest recorded agent, if any.
    pub nearest: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Seconds until the goal radius was reached.
    pub t_goal: Option<f64>,
    pub n_collide: usize,
    /// Smallest ego-agent distance over the run; infinite without agents.
    pub d_min: f64,
    /// Mean of the recorded window losses.
    pub l_avg: Option<f64>,
    pub inflation_events: usize,
    /// `(k, λ_k)` starting at `k = 1`.
    pub lambda_trace: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
    pub frames: usize,
    /// Windows closed, including those without agents.
    pub windows: usize,
    pub collision_distance: f64,
    pub max_tracking_error: f64,
    pub skipped_predictions: usize,
    /// Largest `‖x̂_j − x_j‖` seen when windows closed.
    pub observed_value_error: f64,
    /// Largest `|q̂_j − q_j|` seen when windows closed.
    pub observed_dynamics_error: f64,
}

struct WindowPlan {
    start: i64,
    predictions: Vec<SampledTrajectory>,
    ego_path: Vec<Vec2>,
}

fn numerical(frame: i64) -> impl Fn(BarrierError) -> RunError {
    move |e| RunError::Numerical {
        frame,
        message: e.to_string(),
    }
}

fn conformal_failure(frame: i64) -> impl Fn(ConformalError) -> RunError {
    move |e| RunError::Numerical {
        frame,
        message: e.to_string(),
    }
}

/// Runs the closed loop and returns its metrics.
pub fn run(
    config: &SimConfig,
    scene: &ScenarioFrameSet,
    task: &RobotTask,
) -> Result<RunMetrics, RunError> {
    run_traced(config, scene, task, |_| {})
}

/// Like [`run`], calling `trace` once per executed frame.
pub fn run_traced<F: FnMut(&FrameRecord)>(
    config: &SimConfig,
    scene: &ScenarioFrameSet,
    task: &RobotTask,
    mut trace: F,
) -> Result<RunMetrics, RunError> {
    config.validate()?;
    if (scene.dt() - config.dt).abs() > 1e-9 * config.dt {
        return Err(RunError::Config(format!(
            "dt {} does not match the scene's frame interval {}",
            config.dt,
            scene.dt()
        )));
    }
    let (Some(first), Some(last)) = (scene.first_frame(), scene.last_frame()) else {
        return Err(RunError::Scene("scene has no frames".into()));
    };
    let cbf = config.barrier()?;
    let alpha = config.class_kappa()?;
    let tracker =
        TrackingActuator::new(config.k_acc).map_err(|e| RunError::Config(e.to_string()))?;
    let task = RobotTask {
        attract_gain: config.k_att,
        ..*task
    };
    let collision_distance = config
        .collision_distance
        .unwrap_or_else(|| cbf.collision_distance());
    let mut predictor = Predictor::new(config.predictor, config.seed);
    let mut conformal = ConformalState::new(config.lambda_initial, config.eta, config.epsilon)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let ctx = LossContext {
        cbf: &cbf,
        alpha: &alpha,
        squash: config.squash,
    };
    let tau = config.tau_frames as i64;
    let horizon = config.prediction_horizon();
    let step = config.relaxation_step();

    let mut state = task.start;
    let mut metrics = RunMetrics {
        t_goal: None,
        n_collide: 0,
        d_min: f64::INFINITY,
        l_avg: None,
        inflation_events: 0,
        lambda_trace: vec![(1, conformal.lambda)],
        losses: Vec::new(),
        frames: 0,
        windows: 0,
        collision_distance,
        max_tracking_error: 0.0,
        skipped_predictions: 0,
        observed_value_error: 0.0,
        observed_dynamics_error: 0.0,
    };

    let mut frame = first;
    let mut window_index = 0usize;
    let mut plan: Option<WindowPlan> = None;
    loop {
        let at_boundary = (frame - first) % tau == 0;
        let done =
            task.reached(state.position) || metrics.frames >= config.max_frames || frame > last;
        if task.reached(state.position) && metrics.t_goal.is_none() {
            metrics.t_goal = Some((frame - first) as f64 * config.dt);
        }

        if (at_boundary || done) && plan.is_some() {
            let p = plan.take().expect("checked");
            let loss = close_window(
                scene,
                &p,
                frame,
                conformal.lambda,
                &ctx,
                config.dt,
                &mut metrics,
            )?;
            conformal.update(loss).map_err(conformal_failure(frame))?;
            if let WindowLoss::Value(l) = loss {
                metrics.losses.push(l);
                metrics
                    .lambda_trace
                    .push((metrics.lambda_trace.len() + 1, conformal.lambda));
            }
            metrics.windows += 1;
            window_index += 1;
        }
        if done {
            break;
        }
        if plan.is_none() {
            plan = Some(open_window(
                scene,
                &mut predictor,
                &cbf,
                state.position,
                frame,
                horizon,
                config.rho0,
                &mut metrics,
            ));
        }
        let p = plan.as_mut().expect("window open");

        // Safety filter against the predictions.
        let mut constraints = Vec::new();
        for pred in &p.predictions {
            let Some(x_hat) = pred.position_at(frame) else {
                continue;
            };
            if (x_hat - state.position).norm() >= config.rho0 {
                continue;
            }
            let v_hat = differentiate(pred, frame).map_err(|e| RunError::Numerical {
                frame,
                message: e.to_string(),
            })?;
            constraints.push(
                build_conformal_constraint(
                    &cbf,
                    &alpha,
                    state.position,
                    pred.agent_id,
                    &AgentState::new(x_hat, v_hat),
                    conformal.lambda,
                )
                .map_err(numerical(frame))?,
            );
        }
        let reference = task.reference_control(&state);
        let n_constraints = constraints.len();
        let problem = QpProblem::new(
            DVector::from_column_slice(reference.as_slice()),
            constraints,
        );
        let (commanded, status, inflation) = if n_constraints == 0 {
            (reference, QpStatus::Unconstrained, 0.0)
        } else {
            match solve_with_relaxation(&problem, step, config.relaxation_steps) {
                Ok((sol, inflation)) => {
                    let status = if inflation > 0.0 {
                        metrics.inflation_events += 1;
                        QpStatus::Relaxed
                    } else {
                        QpStatus::Solved
                    };
                    (
                        Vec2::new(sol.decision[0], sol.decision[1]),
                        status,
                        inflation,
                    )
                }
                Err(e @ (QpError::StillInfeasible { .. } | QpError::Infeasible)) => {
                    let inflation = match e {
                        QpError::StillInfeasible { inflation } => inflation,
                        _ => 0.0,
                    };
                    return Err(RunError::Infeasible {
                        frame,
                        lambda: conformal.lambda,
                        state,
                        constraints: n_constraints,
                        inflation,
                    });
                }
                Err(e) => {
                    return Err(RunError::Numerical {
                        frame,
                        message: e.to_string(),
                    })
                }
            }
        };

        // Diagnostics against the recorded agents.
        let mut true_margin: Option<f64> = None;
        for pred in &p.predictions {
            // Same samples the window loss will use, so velocities agree.
            let Some(traj) = scene.segment(pred.agent_id, p.start, p.start, p.start + tau) else {
                continue;
            };
            if traj.len() < 2 || !traj.contains_frame(frame) {
                continue;
            }
            let x_j = traj.position_at(frame).expect("anchor sample");
            let v_j = differentiate(&traj, frame).expect("two samples");
            let c = build_true_constraint(
                &cbf,
                &alpha,
                state.position,
                pred.agent_id,
                &AgentState::new(x_j, v_j),
            )
            .map_err(numerical(frame))?;
            let r = c.residual(&DVector::from_column_slice(commanded.as_slice()));
            true_margin = Some(true_margin.map_or(r, |m| m.min(r)));
        }
        let nearest = scene
            .agents_at(frame)
            .iter()
            .map(|o| (o.position - state.position).norm())
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))));
        if let Some(d) = nearest {
            metrics.d_min = metrics.d_min.min(d);
            if d < collision_distance {
                metrics.n_collide += 1;
            }
        }
        let tracking_error = (state.velocity - commanded).norm();
        metrics.max_tracking_error = metrics.max_tracking_error.max(tracking_error);
        trace(&FrameRecord {
            frame,
            window: window_index,
            position: [state.position.x, state.position.y],
            velocity: [state.velocity.x, state.velocity.y],
            commanded: [commanded.x, commanded.y],
            lambda: conformal.lambda,
            constraints: n_constraints,
            qp_status: status,
            inflation,
            tracking_error,
            true_margin,
            nearest,
        });

        p.ego_path.push(state.position);
        let accel = tracker
            .track_velocity(state.velocity, commanded)
            .map_err(|e| RunError::Numerical {
                frame,
                message: e.to_string(),
            })?;
        state = state
            .advance(accel, config.dt)
            .map_err(|e| RunError::Numerical {
                frame,
                message: e.to_string(),
            })?;
        metrics.frames += 1;
        frame += 1;
    }

    metrics.l_avg = conformal.average_loss();
    Ok(metrics)
}

#[allow(clippy::too_many_arguments)]
fn open_window(
    scene: &ScenarioFrameSet,
    predictor: &mut Predictor,
    cbf: &PotentialFieldCbf,
    ego_position: Vec2,
    frame: i64,
    horizon: usize,
    rho0: f64,
    metrics: &mut RunMetrics,
) -> WindowPlan {
    let sensed = crate::scenario::sensed_agents(scene, ego_position, rho0, frame);
    let lookback = horizon as i64;
    let histories: Vec<_> = sensed
        .iter()
        .filter_map(|&(id, _)| scene.segment(id, frame, frame - lookback, frame))
        .collect();
    let futures: Vec<_> = if predictor.kind().needs_future() {
        sensed
            .iter()
            .filter_map(|&(id, _)| scene.segment(id, frame, frame, frame + horizon as i64 - 1))
            .collect()
    } else {
        Vec::new()
    };
    // Future robot positions are unknown here, so the dynamics-error bound
    // of the noisy oracle is checked at the current position.
    let ego_path = [ego_position];
    let batch = predictor.predict(&PredictionRequest {
        frame,
        horizon,
        histories: &histories,
        futures: &futures,
        ego_path: &ego_path,
        cbf,
    });
    metrics.skipped_predictions += batch.skipped.len();
    WindowPlan {
        start: frame,
        predictions: batch.trajectories,
        ego_path: Vec::new(),
    }
}

/// Loss of a window that ran from `plan.start` up to (excluding) `end`.
fn close_window(
    scene: &ScenarioFrameSet,
    plan: &WindowPlan,
    end: i64,
    lambda: f64,
    ctx: &LossContext<'_>,
    dt: f64,
    metrics: &mut RunMetrics,
) -> Result<WindowLoss, RunError> {
    if plan.ego_path.is_empty() {
        return Ok(WindowLoss::NoAgents);
    }
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    for pred in &plan.predictions {
        let Some(truth) = scene.segment(pred.agent_id, plan.start, plan.start, end) else {
            continue;
        };
        if truth.len() < 2 {
            continue;
        }
        predicted.push(pred.clone());
        actual.push(truth);
    }
    let ego = SampledTrajectory::new(AgentId(u64::MAX), plan.start, dt, plan.ego_path.clone())
        .map_err(|e| RunError::Numerical {
            frame: end,
            message: e.to_string(),
        })?;
    for (pred, truth) in predicted.iter().zip(&actual) {
        for frame in ego.frames() {
            let (Some(x_j), Some(x_hat)) = (truth.position_at(frame), pred.position_at(frame))
            else {
                continue;
            };
            let x_i = ego.position_at(frame).expect("ego frame");
            let velocities =
                differentiate(truth, frame).and_then(|v| Ok((v, differentiate(pred, frame)?)));
            let Ok((v_j, v_hat)) = velocities else {
                continue;
            };
            let (Ok((_, g)), Ok((_, g_hat))) =
                (ctx.cbf.gradient(x_i, x_j), ctx.cbf.gradient(x_i, x_hat))
            else {
                continue;
            };
            metrics.observed_value_error = metrics.observed_value_error.max((x_hat - x_j).norm());
            metrics.observed_dynamics_error = metrics
                .observed_dynamics_error
                .max((g_hat.dot(&v_hat) - g.dot(&v_j)).abs());
        }
    }
    window_loss(&predicted, &actual, lambda, &ego, ctx).map_err(conformal_failure(end))
}

/// Parameters that a sweep may vary.
pub const GRID_KEYS: [&str; 10] = [
    "eps",
    "eta",
    "tau",
    "a",
    "k_acc",
    "k_rep",
    "k_att",
    "rho0",
    "delta",
    "lambda_initial",
];

/// Returns a copy of `base` with one parameter replaced.
pub fn with_parameter(base: &SimConfig, key: &str, value: f64) -> Result<SimConfig, RunError> {
    let mut c = base.clone();
    match key {
        "eps" | "epsilon" => c.epsilon = value,
        "eta" => c.eta = value,
        "tau" | "tau_frames" => {
            if !(value >= 1.0 && value.fract() == 0.0 && value <= 1e6) {
                return Err(RunError::Config(format!(
                    "tau must be a positive integer, got {value}"
                )));
            }
            c.tau_frames = value as usize;
        }
        "a" | "alpha_slope" => c.alpha_slope = value,
        "k_acc" => c.k_acc = value,
        "k_rep" => c.k_rep = value,
        "k_att" => c.k_att = value,
        "rho0" => c.rho0 = value,
        "delta" => c.delta = value,
        "lambda_initial" => c.lambda_initial = value,
        other => {
            return Err(RunError::Config(format!(
                "unknown sweep parameter '{other}', expected one of {}",
                GRID_KEYS.join(", ")
            )))
        }
    }
    Ok(c)
}

/// Cartesian product of named value lists; the first axis varies slowest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl ParamGrid {
    /// Parses `key=v1,v2,...` items.
    pub fn parse<S: AsRef<str>>(items: &[S]) -> Result<Self, RunError> {
        let mut axes: Vec<(String, Vec<f64>)> = Vec::new();
        for item in items {
            let item = item.as_ref();
            let (key, values) = item.split_once('=').ok_or_else(|| {
                RunError::Config(format!("grid item '{item}' is not key=v1,v2,..."))
            })?;
            let key = key.trim();
            with_parameter(&SimConfig::default(), key, 1.0)?;
            if axes.iter().any(|(k, _)| k == key) {
                return Err(RunError::Config(format!("grid key '{key}' given twice")));
            }
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| {
                            RunError::Config(format!("bad value '{v}' for grid key '{key}'"))
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            axes.push((key.to_string(), values));
        }
        Ok(Self { axes })
    }

    pub fn cells(&self) -> Vec<Vec<(String, f64)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |&v| {
                        let mut c = prefix.clone();
                        c.push((key.clone(), v));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub parameters: Vec<(String, f64)>,
    pub config: SimConfig,
    /// The run's metrics, or the failure message.
    pub outcome: Result<RunMetrics, String>,
}

/// Runs every grid cell on `workers` threads and returns rows in grid order.
/// A failing cell becomes a failed row.
pub fn sweep(
    base: &SimConfig,
    grid: &ParamGrid,
    scene: &ScenarioFrameSet,
    task: &RobotTask,
    workers: usize,
) -> Vec<SweepRow> {
    let cells = grid.cells();
    let configs: Vec<Result<SimConfig, RunError>> = cells
        .iter()
        .map(|cell| {
            cell.iter()
                .try_fold(base.clone(), |c, (k, v)| with_parameter(&c, k, *v))
        })
        .collect();
    let results: Mutex<BTreeMap<usize, Result<RunMetrics, String>>> = Mutex::new(BTreeMap::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let outcome = match config {
                    Ok(c) => run(c, scene, task).map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                results
                    .lock()
                    .expect("no worker panicked")
                    .insert(i, outcome);
            });
        }
    });
    let mut results = results.into_inner().expect("no worker panicked");
    cells
        .into_iter()
        .zip(configs)
        .enumerate()
        .map(|(i, (parameters, config))| SweepRow {
            parameters,
            config: config.unwrap_or_else(|_| base.clone()),
            outcome: results.remove(&i).expect("every cell ran"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::risk_bound;
    use crate::scenario::{synth_scene, Observation, SceneSpec};

    fn corridor_config() -> SimConfig {
        SimConfig {
            tau_frames: 4,
            alpha_slope: 10.0,
            k_rep: 2.0,
            k_att: 0.05,
            rho0: 8.0,
            eta: 1.0,
            ..SimConfig::default()
        }
    }

    fn crossing() -> (ScenarioFrameSet, RobotTask) {
        let spec = SceneSpec::three_pedestrian_crossing();
        let r = spec.robot.expect("built-in scene has a robot");
        let task = RobotTask::new(
            RobotState::at_rest(Vec2::new(r.start[0], r.start[1])),
            Vec2::new(r.goal[0], r.goal[1]),
            1.0,
            r.goal_radius,
        )
        .unwrap();
        (synth_scene(&spec).unwrap(), task)
    }

    fn straight_task(goal_x: f64) -> RobotTask {
        RobotTask::new(
            RobotState::at_rest(Vec2::zeros()),
            Vec2::new(goal_x, 0.0),
            1.0,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_reaches_goal() {
        let scene = ScenarioFrameSet::empty("empty", 30.0, 900).unwrap();
        let config = SimConfig {
            k_att: 0.5,
            ..corridor_config()
        };
        let m = run(&config, &scene, &straight_task(10.0)).unwrap();
        assert!(m.t_goal.is_some());
        assert_eq!(m.n_collide, 0);
        assert_eq!(m.d_min, f64::INFINITY);
        assert_eq!(m.l_avg, None);
        assert!(m.losses.is_empty());
        assert_eq!(m.lambda_trace, vec![(1, 0.0)]);
        assert!(m.windows > 0);
    }

    #[test]
    fn ground_truth_fixed_point() {
        let (scene, task) = crossing();
        let config = SimConfig {
            predictor: PredictorKind::GroundTruthOracle,
            ..corridor_config()
        };
        let mut margins = Vec::new();
        let m = run_traced(&config, &scene, &task, |r| margins.extend(r.true_margin)).unwrap();
        assert!(m.losses.len() > 100);
        assert!(m.losses.iter().all(|&l| l == 0.0));
        assert!(m.lambda_trace.iter().all(|&(_, l)| l == 0.0));
        assert_eq!(m.l_avg, Some(0.0));
        assert_eq!(m.observed_value_error, 0.0);
        assert!(
            margins.iter().all(|&r| r >= -1e-8),
            "{:?}",
            margins.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn lambda_trace_matches_update_rule() {
        let (scene, task) = crossing();
        for eps in [-0.3, 0.0, 0.35] {
            let config = SimConfig {
                epsilon: eps,
                eta: 2.0,
                ..corridor_config()
            };
            let m = run(&config, &scene, &task).unwrap();
            assert_eq!(m.lambda_trace.len(), m.losses.len() + 1);
            let mut acc = config.lambda_initial;
            for (k, (&l, w)) in m.losses.iter().zip(m.lambda_trace.windows(2)).enumerate() {
                assert_eq!(w[0].0, k + 1);
                assert!((w[1].1 - w[0].1).abs() < config.eta);
                acc += config.eta * (eps - l);
                assert!((w[1].1 - acc).abs() < 1e-9);
            }
            let mean = m.losses.iter().sum::<f64>() / m.losses.len() as f64;
            assert!((m.l_avg.unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_sweep_within_risk_bound() {
        let (scene, task) = crossing();
        let grid = ParamGrid::parse(&["eps=-0.4,-0.2,0,0.2,0.4"]).unwrap();
        let rows = sweep(&corridor_config(), &grid, &scene, &task, 4);
        assert_eq!(rows.len(), 5);
        for row in rows {
            let m = row.outcome.unwrap();
            let c = &row.config;
            let alpha = c.class_kappa().unwrap();
            let cbf = c.barrier().unwrap();
            let bounds = crate::barrier::BoundSet::new(
                cbf.max_agent_gradient(),
                m.observed_value_error,
                m.observed_dynamics_error,
            )
            .unwrap();
            // Any value below the bound is also rapidly safe; cap it so the
            // initial-value hypothesis holds.
            let lambda_safe =
                crate::conformal::lambda_safe_bound(&bounds, &alpha, c.squash, c.epsilon)
                    .unwrap()
                    .min(c.lambda_initial + c.eta);
            let mut state = ConformalState::new(c.lambda_initial, c.eta, c.epsilon).unwrap();
            for &l in &m.losses {
                state.update(WindowLoss::Value(l)).unwrap();
            }
            let rb = risk_bound(&state, lambda_safe, m.losses.len()).unwrap();
            assert!(rb.holds(), "eps {}: {rb:?}", c.epsilon);
            assert_eq!(Some(rb.average_loss), m.l_avg.map(|_| rb.average_loss));
        }
    }

    #[test]
    fn sweep_is_deterministic_and_matches_run() {
        let (scene, task) = crossing();
        let grid = ParamGrid::parse(&["eps=-0.2,0.2", "tau=4,12"]).unwrap();
        let a = sweep(&corridor_config(), &grid, &scene, &task, 1);
        let b = sweep(&corridor_config(), &grid, &scene, &task, 8);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.parameters, y.parameters);
            assert_eq!(x.outcome, y.outcome);
        }
        assert_eq!(
            a[1].parameters,
            vec![("eps".to_string(), -0.2), ("tau".to_string(), 12.0)]
        );
        let single = sweep(
            &corridor_config(),
            &ParamGrid::parse(&["eps=-0.2"]).unwrap(),
            &scene,
            &task,
            3,
        );
        let direct = run(
            &SimConfig {
                epsilon: -0.2,
                ..corridor_config()
            },
            &scene,
            &task,
        )
        .unwrap();
        assert_eq!(single[0].outcome.as_ref().unwrap(), &direct);
    }

    #[test]
    fn failed_cells_do_not_stop_the_sweep() {
        let (scene, task) = crossing();
        let grid = ParamGrid::parse(&["eps=0,0.7"]).unwrap();
        let rows = sweep(&corridor_config(), &grid, &scene, &task, 2);
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.as_ref().unwrap_err().contains("epsilon"));
    }

    #[test]
    fn grid_parsing() {
        let g = ParamGrid::parse(&["eps=-0.4, 0.4", "k_att=1"]).unwrap();
        assert_eq!(g.cells().len(), 2);
        assert!(ParamGrid::parse(&["bogus=1"]).is_err());
        assert!(ParamGrid::parse(&["eps"]).is_err());
        assert!(ParamGrid::parse(&["eps=a"]).is_err());
        assert!(ParamGrid::parse(&["eps=1", "eps=2"]).is_err());
        assert!(with_parameter(&SimConfig::default(), "tau", 2.5).is_err());
        assert_eq!(
            ParamGrid::default().cells(),
            vec![Vec::<(String, f64)>::new()]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let scene = ScenarioFrameSet::empty("e", 30.0, 10).unwrap();
        let task = straight_task(5.0);
        for c in [
            SimConfig {
                epsilon: 0.5,
                ..SimConfig::default()
            },
            SimConfig {
                tau_frames: 0,
                ..SimConfig::default()
            },
            SimConfig {
                delta: 1.0,
                ..SimConfig::default()
            },
            SimConfig {
                k_acc: 0.0,
                ..SimConfig::default()
            },
            SimConfig {
                eta: -1.0,
                ..SimConfig::default()
            },
            SimConfig {
                dt: 0.1,
                ..SimConfig::default()
            },
        ] {
            let e = run(&c, &scene, &task).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }

    #[test]
    fn frozen_lambda_without_learning() {
        let (scene, task) = crossing();
        let config = SimConfig {
            eta: 0.0,
            lambda_initial: 0.3,
            ..corridor_config()
        };
        let m = run(&config, &scene, &task).unwrap();
        assert!(!m.losses.is_empty());
        assert!(m.lambda_trace.iter().all(|&(_, l)| l == 0.3));
    }

    /// A pedestrian standing on the straight start-goal line. Predictions are
    /// exact, so every gap equals `λ`; the reference loop below projects
    /// onto the single half-space in closed form and integrates with fine
    /// sub-steps.
    #[test]
    fn standing_pedestrian_matches_reference_loop() {
        let frames = 600i64;
        let ped = Vec2::new(6.0, 0.05);
        let obs: BTreeMap<i64, Vec<Observation>> = (0..frames)
            .map(|f| {
                (
                    f,
                    vec![Observation {
                        agent_id: AgentId(1),
                        position: ped,
                        label: "Pedestrian".into(),
                    }],
                )
            })
            .collect();
        let scene = ScenarioFrameSet::new("standing", 30.0, obs).unwrap();
        let task = straight_task(12.0);
        let config = SimConfig {
            epsilon: -0.2,
            k_att: 0.1,
            ..corridor_config()
        };
        let mut engine_path = Vec::new();
        let m = run_traced(&config, &scene, &task, |r| {
            engine_path.push(Vec2::new(r.position[0], r.position[1]))
        })
        .unwrap();

        let (k_rep, rho0, delta, a) = (config.k_rep, config.rho0, config.delta, config.alpha_slope);
        let h_of = |d: f64| {
            let u = if d < rho0 {
                0.5 * k_rep * (1.0 / d - 1.0 / rho0).powi(2)
            } else {
                0.0
            };
            1.0 / (1.0 + u) - delta
        };
        let dh_dd = |d: f64| {
            if d >= rho0 {
                return 0.0;
            }
            let u = 0.5 * k_rep * (1.0 / d - 1.0 / rho0).powi(2);
            k_rep * (1.0 / d - 1.0 / rho0) / (d * d * (1.0 + u).powi(2))
        };
        let (mut x, mut v) = (Vec2::zeros(), Vec2::zeros());
        let mut lambda = 0.0;
        let mut window_max = f64::NEG_INFINITY;
        let substeps = 50;
        let dt = config.dt;
        for f in 0..frames {
            if (x - task.goal).norm() <= task.goal_radius {
                break;
            }
            // The first window has no history to extrapolate from, so it has
            // no constraints and no loss.
            if f > config.tau_frames as i64 && f % config.tau_frames as i64 == 0 {
                lambda += config.eta * (config.epsilon - window_max);
                window_max = f64::NEG_INFINITY;
            }
            assert!(
                (x - engine_path[f as usize]).norm() < 1e-9,
                "frame {f}: {x} vs {}",
                engine_path[f as usize]
            );
            let u_ref = -config.k_att * (x - task.goal);
            let d = (x - ped).norm();
            let mut u = u_ref;
            if d < rho0 && f >= config.tau_frames as i64 {
                let n = dh_dd(d) * (x - ped) / d;
                let b = a * h_of(d) + lambda;
                let r = n.dot(&u_ref) + b;
                if r < 0.0 {
                    u = u_ref - r / n.norm_squared() * n;
                }
            }
            if f >= config.tau_frames as i64 {
                window_max = window_max.max(lambda.atan() / std::f64::consts::PI);
            }
            let acc = -config.k_acc * (v - u);
            let h = dt / substeps as f64;
            for _ in 0..substeps {
                x += v * h + 0.5 * acc * h * h;
                v += acc * h;
            }
        }
        assert!(
            m.d_min > m.collision_distance,
            "{} vs {}",
            m.d_min,
            m.collision_distance
        );
        let deviation = engine_path.iter().map(|p| p.y.abs()).fold(0.0, f64::max);
        assert!(
            deviation > 0.3,
            "robot should swerve, max |y| = {deviation}"
        );
    }
}
