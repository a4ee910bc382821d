//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys keep the [`SimConfig`] defaults.
//!
//! ```toml
//! tau_frames = 4
//! alpha_slope = 10.0
//! rho0 = 8.0
//! eta = 1.0
//! epsilon = -0.2
//! predictor = "noise-bounded-oracle"
//! noise_e_v = 0.5
//! noise_e_d = 0.1
//! start = [0.0, 0.0]
//! goal = [30.0, 0.0]
//! labels = ["Pedestrian"]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::Squashing;
use crate::dynamics::RobotState;
use crate::engine::SimConfig;
use crate::predictor::PredictorKind;
use crate::scenario::{LabelFilter, RobotSpec, RobotTask};
use crate::Vec2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("override '{0}' is not key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dt: Option<f64>,
    pub tau_frames: Option<usize>,
    pub alpha_slope: Option<f64>,
    pub k_acc: Option<f64>,
    pub k_rep: Option<f64>,
    pub k_att: Option<f64>,
    pub rho0: Option<f64>,
    pub delta: Option<f64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda_initial: Option<f64>,
    /// `ground-truth-oracle`, `constant-velocity` or `noise-bounded-oracle`.
    pub predictor: Option<String>,
    pub noise_e_v: Option<f64>,
    pub noise_e_d: Option<f64>,
    pub seed: Option<u64>,
    pub max_frames: Option<usize>,
    pub horizon_frames: Option<usize>,
    pub collision_distance: Option<f64>,
    pub relaxation_steps: Option<usize>,
    pub squash: Option<Squashing>,
    pub start: Option<[f64; 2]>,
    pub goal: Option<[f64; 2]>,
    pub goal_radius: Option<f64>,
    /// Annotation labels to keep; empty or missing keeps all.
    pub labels: Option<Vec<String>>,
}

/// A parsed configuration: simulation parameters plus robot placement.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub start: Option<Vec2>,
    pub goal: Option<Vec2>,
    pub goal_radius: Option<f64>,
    pub labels: LabelFilter,
}

impl ConfigFile {
    pub fn into_run_config(self) -> Result<RunConfig, ConfigError> {
        let d = SimConfig::default();
        let predictor = match self.predictor.as_deref() {
            None | Some("constant-velocity") => PredictorKind::ConstantVelocity,
            Some("ground-truth-oracle") => PredictorKind::GroundTruthOracle,
            Some("noise-bounded-oracle") => PredictorKind::NoiseBoundedOracle {
                e_v: self.noise_e_v.unwrap_or(0.0),
                e_d: self.noise_e_d.unwrap_or(0.0),
            },
            Some(other) => {
                return Err(ConfigError::Invalid(format!("unknown predictor '{other}'")))
            }
        };
        if !matches!(predictor, PredictorKind::NoiseBoundedOracle { .. })
            && (self.noise_e_v.is_some() || self.noise_e_d.is_some())
        {
            return Err(ConfigError::Invalid(
                "noise bounds given for a predictor without noise".into(),
            ));
        }
        let sim = SimConfig {
            dt: self.dt.unwrap_or(d.dt),
            tau_frames: self.tau_frames.unwrap_or(d.tau_frames),
            alpha_slope: self.alpha_slope.unwrap_or(d.alpha_slope),
            k_acc: self.k_acc.unwrap_or(d.k_acc),
            k_rep: self.k_rep.unwrap_or(d.k_rep),
            k_att: self.k_att.unwrap_or(d.k_att),
            rho0: self.rho0.unwrap_or(d.rho0),
            delta: self.delta.unwrap_or(d.delta),
            eta: self.eta.unwrap_or(d.eta),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            lambda_initial: self.lambda_initial.unwrap_or(d.lambda_initial),
            predictor,
            seed: self.seed.unwrap_or(d.seed),
            max_frames: self.max_frames.unwrap_or(d.max_frames),
            horizon_frames: self.horizon_frames.unwrap_or(d.horizon_frames),
            collision_distance: self.collision_distance.or(d.collision_distance),
            relaxation_steps: self.relaxation_steps.unwrap_or(d.relaxation_steps),
            squash: self.squash.unwrap_or(d.squash),
        };
        sim.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(RunConfig {
            sim,
            start: self.start.map(|[x, y]| Vec2::new(x, y)),
            goal: self.goal.map(|[x, y]| Vec2::new(x, y)),
            goal_radius: self.goal_radius,
            labels: LabelFilter::only(self.labels.unwrap_or_default()),
        })
    }
}

/// Splits `key=value`; the value is read as a TOML value, or as a string if
/// it does not parse as one.
fn override_value(item: &str) -> Result<(String, toml::Value), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(item.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(item.into()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

/// Parses configuration text and applies `key=value` overrides on top.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text)?;
    for item in overrides {
        let (key, value) = override_value(item)?;
        table.insert(key, value);
    }
    let file: ConfigFile = toml::Value::Table(normalize_numbers(table)).try_into()?;
    file.into_run_config()
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

const FLOAT_KEYS: [&str; 16] = [
    "dt",
    "alpha_slope",
    "k_acc",
    "k_rep",
    "k_att",
    "rho0",
    "delta",
    "eta",
    "epsilon",
    "lambda_initial",
    "noise_e_v",
    "noise_e_d",
    "collision_distance",
    "goal_radius",
    "start",
    "goal",
];

/// Lets integers such as `eta = 1` fill float keys.
fn normalize_numbers(mut table: toml::Table) -> toml::Table {
    for (key, value) in table.iter_mut() {
        if FLOAT_KEYS.contains(&key.as_str()) {
            to_float(value);
        }
    }
    table
}

fn to_float(value: &mut toml::Value) {
    match value {
        toml::Value::Integer(i) => *value = toml::Value::Float(*i as f64),
        toml::Value::Array(items) => items.iter_mut().for_each(to_float),
        _ => {}
    }
}

impl RunConfig {
    /// The robot task, taking placement from the configuration first and the
    /// scene's robot section second.
    pub fn task(&self, scene_robot: Option<&RobotSpec>) -> Result<RobotTask, ConfigError> {
        let start = self
            .start
            .or(scene_robot.map(|r| Vec2::new(r.start[0], r.start[1])))
            .ok_or_else(|| ConfigError::Invalid("no robot start given".into()))?;
        let goal = self
            .goal
            .or(scene_robot.map(|r| Vec2::new(r.goal[0], r.goal[1])))
            .ok_or_else(|| ConfigError::Invalid("no robot goal given".into()))?;
        let radius = self
            .goal_radius
            .or(scene_robot.map(|r| r.goal_radius))
            .unwrap_or(1.0);
        RobotTask::new(RobotState::at_rest(start), goal, self.sim.k_att, radius)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Parameters suited to the built-in crossing scene, as configuration text.
pub fn corridor_config_text() -> String {
    "# Corridor-scale parameters for the built-in crossing scene.\n\
     tau_frames = 4\n\
     alpha_slope = 10.0\n\
     k_acc = 2.0\n\
     k_rep = 2.0\n\
     k_att = 0.05\n\
     rho0 = 8.0\n\
     delta = 0.5\n\
     eta = 1.0\n\
     epsilon = 0.0\n\
     predictor = \"constant-velocity\"\n\
     seed = 0\n"
        .to_string()
}
