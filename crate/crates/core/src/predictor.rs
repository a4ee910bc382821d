//! Sampled trajectories, trajectory predictors and finite-difference
//! velocities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::PotentialFieldCbf;
use crate::{AgentId, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("trajectory of agent {0} has fewer than two samples")]
    TooFewSamples(AgentId),
    #[error("frame {frame} is outside the trajectory of agent {agent} ({start}..={end})")]
    FrameOutOfRange {
        agent: AgentId,
        frame: i64,
        start: i64,
        end: i64,
    },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
}

/// Positions of one agent at consecutive frames, `dt` seconds apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    pub agent_id: AgentId,
    pub start_frame: i64,
    pub dt: f64,
    pub positions: Vec<Vec2>,
}

impl SampledTrajectory {
    pub fn new(
        agent_id: AgentId,
        start_frame: i64,
        dt: f64,
        positions: Vec<Vec2>,
    ) -> Result<Self, PredictorError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PredictorError::Invalid(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if positions.is_empty() {
            return Err(PredictorError::Invalid("no samples".into()));
        }
        if positions
            .iter()
            .any(|p| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(PredictorError::Invalid("non-finite position".into()));
        }
        Ok(Self {
            agent_id,
            start_frame,
            dt,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Last frame covered (inclusive).
    pub fn end_frame(&self) -> i64 {
        self.start_frame + self.positions.len() as i64 - 1
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<i64> {
        self.start_frame..=self.end_frame()
    }

    pub fn contains_frame(&self, frame: i64) -> bool {
        self.frames().contains(&frame)
    }

    pub fn position_at(&self, frame: i64) -> Option<Vec2> {
        if self.contains_frame(frame) {
            Some(self.positions[(frame - self.start_frame) as usize])
        } else {
            None
        }
    }

    /// The samples in `from..=to`, if the trajectory covers at least one of them.
    pub fn slice(&self, from: i64, to: i64) -> Option<Self> {
        let lo = from.max(self.start_frame);
        let hi = to.min(self.end_frame());
        if lo > hi {
            return None;
        }
        let a = (lo - self.start_frame) as usize;
        let b = (hi - self.start_frame) as usize;
        Some(Self {
            agent_id: self.agent_id,
            start_frame: lo,
            dt: self.dt,
            positions: self.positions[a..=b].to_vec(),
        })
    }
}

/// Velocity of `trajectory` at `frame` in units per second: central
/// difference in the interior, one-sided at either end.
pub fn differentiate(trajectory: &SampledTrajectory, frame: i64) -> Result<Vec2, PredictorError> {
    let n = trajectory.len();
    if n < 2 {
        return Err(PredictorError::TooFewSamples(trajectory.agent_id));
    }
    if !trajectory.contains_frame(frame) {
        return Err(PredictorError::FrameOutOfRange {
            agent: trajectory.agent_id,
            frame,
            start: trajectory.start_frame,
            end: trajectory.end_frame(),
        });
    }
    let p = &trajectory.positions;
    let dt = trajectory.dt;
    let i = (frame - trajectory.start_frame) as usize;
    Ok(if i == 0 {
        (p[1] - p[0]) / dt
    } else if i == n - 1 {
        (p[n - 1] - p[n - 2]) / dt
    } else {
        (p[i + 1] - p[i - 1]) / (2.0 * dt)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictorKind {
    /// Returns the recorded future. Only meaningful in replay and tests.
    GroundTruthOracle,
    /// Extrapolates the last observed per-frame displacement.
    ConstantVelocity,
    /// Recorded future plus a smooth random offset of norm at most `e_v`,
    /// shrunk toward the truth until the dynamics error stays within `e_d`.
    NoiseBoundedOracle { e_v: f64, e_d: f64 },
}

impl PredictorKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GroundTruthOracle => "ground-truth-oracle",
            Self::ConstantVelocity => "constant-velocity",
            Self::NoiseBoundedOracle { .. } => "noise-bounded-oracle",
        }
    }

    pub fn needs_future(&self) -> bool {
        !matches!(self, Self::ConstantVelocity)
    }
}

/// Everything a predictor may look at when forecasting from `frame`.
#[derive(Debug, Clone, Copy)]
pub struct PredictionRequest<'a> {
    /// First predicted frame; histories end at or before it.
    pub frame: i64,
    /// Number of predicted samples per agent, starting at `frame`.
    pub horizon: usize,
    pub histories: &'a [SampledTrajectory],
    /// Recorded futures starting at `frame`, read by the oracle predictors.
    pub futures: &'a [SampledTrajectory],
    /// Ego positions over the horizon, used to bound the dynamics error.
    pub ego_path: &'a [Vec2],
    pub cbf: &'a PotentialFieldCbf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedAgent {
    pub agent_id: AgentId,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionBatch {
    pub trajectories: Vec<SampledTrajectory>,
    pub skipped: Vec<SkippedAgent>,
}

/// A seeded predictor instance. Each simulation owns one.
#[derive(Debug, Clone)]
pub struct Predictor {
    kind: PredictorKind,
    rng: ChaCha8Rng,
}

impl Predictor {
    pub fn new(kind: PredictorKind, seed: u64) -> Self {
        Self {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    pub fn predict(&mut self, request: &PredictionRequest<'_>) -> PredictionBatch {
        let mut batch = PredictionBatch::default();
        for history in request.histories {
            let id = history.agent_id;
            if history.len() < 2 {
                batch.skipped.push(SkippedAgent {
                    agent_id: id,
                    reason: "fewer than two history samples".into(),
                });
                continue;
            }
            let predicted = match self.kind {
                PredictorKind::ConstantVelocity => {
                    Some(constant_velocity(history, request.frame, request.horizon))
                }
                PredictorKind::GroundTruthOracle => recorded_future(request, id),
                PredictorKind::NoiseBoundedOracle { e_v, e_d } => recorded_future(request, id)
                    .map(|truth| perturb(&mut self.rng, &truth, e_v, e_d, request)),
            };
            match predicted {
                Some(t) => batch.trajectories.push(t),
                None => batch.skipped.push(SkippedAgent {
                    agent_id: id,
                    reason: "no recorded future of two or more samples".into(),
                }),
            }
        }
        batch
    }
}

fn constant_velocity(history: &SampledTrajectory, frame: i64, horizon: usize) -> SampledTrajectory {
    let n = history.len();
    let last = history.positions[n - 1];
    let step = last - history.positions[n - 2];
    let lead = (frame - history.end_frame()) as f64;
    let positions = (0..horizon.max(2))
        .map(|i| last + step * (lead + i as f64))
        .collect();
    SampledTrajectory {
        agent_id: history.agent_id,
        start_frame: frame,
        dt: history.dt,
        positions,
    }
}

fn recorded_future(request: &PredictionRequest<'_>, id: AgentId) -> Option<SampledTrajectory> {
    let future = request.futures.iter().find(|f| f.agent_id == id)?;
    if future.start_frame != request.frame {
        return None;
    }
    let last = request.frame + request.horizon.max(2) as i64 - 1;
    future.slice(request.frame, last).filter(|t| t.len() >= 2)
}

fn unit_disc(rng: &mut ChaCha8Rng) -> Vec2 {
    loop {
        let p = Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

/// Largest dynamics error `|∂h/∂x_j(x_i, x̂_j)·x̂̇_j − ∂h/∂x_j(x_i, x_j)·ẋ_j|`
/// over the samples, or `None` if some sample is singular.
pub fn dynamics_error(
    cbf: &PotentialFieldCbf,
    predicted: &SampledTrajectory,
    truth: &SampledTrajectory,
    ego_path: &[Vec2],
) -> Option<f64> {
    let mut worst = 0.0f64;
    for (n, frame) in truth.frames().enumerate() {
        let x_i = *ego_path.get(n).or(ego_path.last())?;
        let x_j = truth.position_at(frame)?;
        let x_hat = predicted.position_at(frame)?;
        let v_j = differentiate(truth, frame).ok()?;
        let v_hat = differentiate(predicted, frame).ok()?;
        let (_, g_true) = cbf.gradient(x_i, x_j).ok()?;
        let (_, g_pred) = cbf.gradient(x_i, x_hat).ok()?;
        worst = worst.max((g_pred.dot(&v_hat) - g_true.dot(&v_j)).abs());
    }
    Some(worst)
}

fn perturb(
    rng: &mut ChaCha8Rng,
    truth: &SampledTrajectory,
    e_v: f64,
    e_d: f64,
    request: &PredictionRequest<'_>,
) -> SampledTrajectory {
    // A quadratic Bézier curve through three points of the unit disc stays in
    // the disc, so every offset has norm at most e_v.
    let (a, b, c) = (unit_disc(rng), unit_disc(rng), unit_disc(rng));
    let n = truth.len();
    let offsets: Vec<Vec2> = (0..n)
        .map(|i| {
            let s = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let w = (1.0 - s) * (1.0 - s) * a + 2.0 * s * (1.0 - s) * b + s * s * c;
            w * e_v
        })
        .collect();

    let build = |scale: f64| SampledTrajectory {
        positions: truth
            .positions
            .iter()
            .zip(&offsets)
            .map(|(p, o)| p + o * scale)
            .collect(),
        ..truth.clone()
    };

    if n < 2 {
        return build(1.0);
    }
    let mut scale = 1.0;
    for _ in 0..64 {
        let candidate = build(scale);
        let ok = dynamics_error(request.cbf, &candidate, truth, request.ego_path)
            .is_some_and(|err| err <= e_d);
        if ok {
            return candidate;
        }
        scale *= 0.5;
    }
    truth.clone()
}
