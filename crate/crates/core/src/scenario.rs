//! Scenes: annotation ingestion, scripted scenes, the goal task and the
//! sensing-range filter.
//!
//! Annotation files hold one row per agent per frame:
//!
//! ```text
//! track_id xmin ymin xmax ymax frame lost occluded generated "label"
//! ```
//!
//! The agent position is the centre of its bounding box.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::RobotState;
use crate::predictor::SampledTrajectory;
use crate::{AgentId, Vec2};

pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("scene spec: {0}")]
    Spec(#[from] toml::de::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: AgentId,
    pub position: Vec2,
    pub label: String,
}

/// Agent observations indexed by frame over a contiguous frame range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFrameSet {
    scene_name: String,
    fps: f64,
    frames: BTreeMap<i64, Vec<Observation>>,
    tracks: BTreeMap<AgentId, BTreeMap<i64, Vec2>>,
}

impl ScenarioFrameSet {
    /// Frames between the first and last given index that are missing get an
    /// empty observation list. Observations within a frame are sorted by id.
    pub fn new(
        scene_name: impl Into<String>,
        fps: f64,
        frames: BTreeMap<i64, Vec<Observation>>,
    ) -> Result<Self, ScenarioError> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(ScenarioError::Invalid(format!(
                "fps must be positive, got {fps}"
            )));
        }
        let mut frames = frames;
        if let (Some(&first), Some(&last)) = (frames.keys().next(), frames.keys().next_back()) {
            for f in first..=last {
                frames.entry(f).or_default();
            }
        }
        let mut tracks: BTreeMap<AgentId, BTreeMap<i64, Vec2>> = BTreeMap::new();
        for (&frame, obs) in frames.iter_mut() {
            obs.sort_by_key(|o| o.agent_id);
            for o in obs.iter() {
                if !(o.position.x.is_finite() && o.position.y.is_finite()) {
                    return Err(ScenarioError::Invalid(format!(
                        "agent {} has a non-finite position in frame {frame}",
                        o.agent_id
                    )));
                }
                if tracks
                    .entry(o.agent_id)
                    .or_default()
                    .insert(frame, o.position)
                    .is_some()
                {
                    return Err(ScenarioError::Invalid(format!(
                        "agent {} appears twice in frame {frame}",
                        o.agent_id
                    )));
                }
            }
        }
        Ok(Self {
            scene_name: scene_name.into(),
            fps,
            frames,
            tracks,
        })
    }

    pub fn empty(
        scene_name: impl Into<String>,
        fps: f64,
        frame_count: usize,
    ) -> Result<Self, ScenarioError> {
        let frames = (0..frame_count as i64).map(|f| (f, Vec::new())).collect();
        Self::new(scene_name, fps, frames)
    }

    pub fn scene_name(&self) -> &str {
        &self.scene_name
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    pub fn frames(&self) -> &BTreeMap<i64, Vec<Observation>> {
        &self.frames
    }

    pub fn first_frame(&self) -> Option<i64> {
        self.frames.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<i64> {
        self.frames.keys().next_back().copied()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn agent_ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.tracks.keys().copied()
    }

    pub fn observation_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.observation_count() == 0
    }

    pub fn agents_at(&self, frame: i64) -> &[Observation] {
        self.frames.get(&frame).map_or(&[], Vec::as_slice)
    }

    pub fn position(&self, agent: AgentId, frame: i64) -> Option<Vec2> {
        self.tracks.get(&agent)?.get(&frame).copied()
    }

    /// The agent's contiguous run of samples through `anchor`, clipped to
    /// `from..=to`. `None` if the agent is not present at `anchor`.
    pub fn segment(
        &self,
        agent: AgentId,
        anchor: i64,
        from: i64,
        to: i64,
    ) -> Option<SampledTrajectory> {
        let track = self.tracks.get(&agent)?;
        if anchor < from || anchor > to || !track.contains_key(&anchor) {
            return None;
        }
        let mut start = anchor;
        while start > from && track.contains_key(&(start - 1)) {
            start -= 1;
        }
        let mut end = anchor;
        while end < to && track.contains_key(&(end + 1)) {
            end += 1;
        }
        let positions = (start..=end).map(|f| track[&f]).collect();
        SampledTrajectory::new(agent, start, self.dt(), positions).ok()
    }
}

/// Labels to keep. An empty filter keeps every label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelFilter(pub BTreeSet<String>);

impl LabelFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn accepts(&self, label: &str) -> bool {
        self.0.is_empty() || self.0.contains(label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseIssue {
    pub line: usize,
    pub message: String,
}

/// Result of a lenient parse: the rows that parsed plus one issue per bad row.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationReport {
    pub frame_set: ScenarioFrameSet,
    pub issues: Vec<ParseIssue>,
    pub rows_read: usize,
    pub dropped_lost: usize,
    pub dropped_label: usize,
}

struct Row {
    track_id: u64,
    center: Vec2,
    frame: i64,
    lost: bool,
    label: String,
}

fn parse_row(line: &str) -> Result<Row, String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 10 {
        return Err(format!("expected 10 fields, got {}", tokens.len()));
    }
    let (numeric, rest) = tokens.split_at(9);
    let raw_label = rest.join(" ");
    let label = raw_label
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .ok_or_else(|| format!("label {raw_label} is not quoted"))?;
    if label.is_empty() || label.contains('"') {
        return Err(format!("bad label {raw_label}"));
    }

    let int = |i: usize, name: &str| -> Result<i64, String> {
        numeric[i]
            .parse::<i64>()
            .map_err(|_| format!("{name} '{}' is not an integer", numeric[i]))
    };
    let float = |i: usize, name: &str| -> Result<f64, String> {
        let v = numeric[i]
            .parse::<f64>()
            .map_err(|_| format!("{name} '{}' is not a number", numeric[i]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{name} is not finite"))
        }
    };
    let flag = |i: usize, name: &str| -> Result<bool, String> {
        match numeric[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("{name} flag must be 0 or 1, got '{other}'")),
        }
    };

    let track_id = int(0, "track_id")?;
    if track_id < 0 {
        return Err(format!("negative track_id {track_id}"));
    }
    let (xmin, ymin, xmax, ymax) = (
        float(1, "xmin")?,
        float(2, "ymin")?,
        float(3, "xmax")?,
        float(4, "ymax")?,
    );
    let frame = int(5, "frame")?;
    let lost = flag(6, "lost")?;
    flag(7, "occluded")?;
    flag(8, "generated")?;
    Ok(Row {
        track_id: track_id as u64,
        center: Vec2::new((xmin + xmax) / 2.0, (ymin + ymax) / 2.0),
        frame,
        lost,
        label: label.to_string(),
    })
}

/// Parses every row, collecting malformed ones as issues instead of failing.
/// Blank lines are ignored. Duplicate `(track, frame)` rows are issues too.
pub fn parse_annotations_report(
    text: &str,
    filter: &LabelFilter,
    scene_name: &str,
    fps: f64,
) -> Result<AnnotationReport, ScenarioError> {
    let mut frames: BTreeMap<i64, Vec<Observation>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut issues = Vec::new();
    let (mut rows_read, mut dropped_lost, mut dropped_label) = (0, 0, 0);
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        rows_read += 1;
        let row = match parse_row(line.trim()) {
            Ok(r) => r,
            Err(message) => {
                issues.push(ParseIssue {
                    line: line_no,
                    message,
                });
                continue;
            }
        };
        if row.lost {
            dropped_lost += 1;
            continue;
        }
        if !filter.accepts(&row.label) {
            dropped_label += 1;
            continue;
        }
        if !seen.insert((row.track_id, row.frame)) {
            issues.push(ParseIssue {
                line: line_no,
                message: format!(
                    "duplicate row for track {} in frame {}",
                    row.track_id, row.frame
                ),
            });
            continue;
        }
        frames.entry(row.frame).or_default().push(Observation {
            agent_id: AgentId(row.track_id),
            position: row.center,
            label: row.label,
        });
    }
    Ok(AnnotationReport {
        frame_set: ScenarioFrameSet::new(scene_name, fps, frames)?,
        issues,
        rows_read,
        dropped_lost,
        dropped_label,
    })
}

/// Strict parse: the first malformed row is an error carrying its line number.
pub fn parse_annotations(
    text: &str,
    filter: &LabelFilter,
    scene_name: &str,
    fps: f64,
) -> Result<ScenarioFrameSet, ScenarioError> {
    let report = parse_annotations_report(text, filter, scene_name, fps)?;
    match report.issues.into_iter().next() {
        Some(issue) => Err(ScenarioError::Parse {
            line: issue.line,
            message: issue.message,
        }),
        None => Ok(report.frame_set),
    }
}

pub fn load_annotations(
    path: &Path,
    filter: &LabelFilter,
) -> Result<ScenarioFrameSet, ScenarioError> {
    let text = read_scene_text(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    parse_annotations(&text, filter, name, DEFAULT_FPS)
}

/// Reads a scene or annotation file, naming the path in the error.
pub fn read_scene_text(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the frame set back as annotation rows with zero-size boxes, so
/// parsing the text gives back the same positions. Empty frames before the
/// first or after the last observation are not represented.
pub fn to_annotation_text(frames: &ScenarioFrameSet) -> String {
    let mut out = String::new();
    for (frame, obs) in &frames.frames {
        for o in obs {
            let (x, y) = (o.position.x, o.position.y);
            writeln!(
                out,
                "{} {x:?} {y:?} {x:?} {y:?} {frame} 0 0 0 \"{}\"",
                o.agent_id, o.label
            )
            .expect("writing to a String");
        }
    }
    out
}

/// Agents strictly closer than `rho0` to the ego, sorted by id.
pub fn sensed_agents(
    frames: &ScenarioFrameSet,
    ego_position: Vec2,
    rho0: f64,
    frame: i64,
) -> Vec<(AgentId, Vec2)> {
    let mut out: Vec<_> = frames
        .agents_at(frame)
        .iter()
        .filter(|o| (o.position - ego_position).norm() < rho0)
        .map(|o| (o.agent_id, o.position))
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotTask {
    pub start: RobotState,
    pub goal: Vec2,
    pub attract_gain: f64,
    pub goal_radius: f64,
}

impl RobotTask {
    pub fn new(
        start: RobotState,
        goal: Vec2,
        attract_gain: f64,
        goal_radius: f64,
    ) -> Result<Self, ScenarioError> {
        if !(goal_radius > 0.0 && goal_radius.is_finite()) {
            return Err(ScenarioError::InvalidTask(format!(
                "goal_radius must be positive, got {goal_radius}"
            )));
        }
        if !(attract_gain > 0.0 && attract_gain.is_finite()) {
            return Err(ScenarioError::InvalidTask(format!(
                "attract_gain must be positive, got {attract_gain}"
            )));
        }
        if !start.is_finite() || !(goal.x.is_finite() && goal.y.is_finite()) {
            return Err(ScenarioError::InvalidTask(
                "non-finite start or goal".into(),
            ));
        }
        Ok(Self {
            start,
            goal,
            attract_gain,
            goal_radius,
        })
    }

    /// Descent direction of the attractive field, `−K_att (X − X_goal)`.
    pub fn reference_control(&self, ego: &RobotState) -> Vec2 {
        -self.attract_gain * (ego.position - self.goal)
    }

    pub fn reached(&self, position: Vec2) -> bool {
        (position - self.goal).norm() <= self.goal_radius
    }
}

pub fn reference_control(task: &RobotTask, ego: &RobotState) -> Vec2 {
    task.reference_control(ego)
}

/// Robot placement stored alongside a scripted scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
}

fn default_goal_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedAgent {
    pub id: u64,
    #[serde(default = "default_label")]
    pub label: String,
    /// `[t, x, y]` rows with strictly increasing `t` in seconds.
    pub waypoints: Vec<[f64; 3]>,
}

fn default_label() -> String {
    "Pedestrian".into()
}

/// A scripted scene: agents follow piecewise-linear waypoint schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Seconds; frames `0..=round(duration·fps)` are generated.
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot: Option<RobotSpec>,
    #[serde(default)]
    pub agents: Vec<ScriptedAgent>,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&read_scene_text(path)?)
    }

    /// Three pedestrians pacing back and forth across a 30-unit corridor
    /// that the robot travels along, over 60 s.
    pub fn three_pedestrian_crossing() -> Self {
        let duration = 60.0;
        let pacing = |id: u64, x: f64, half_width: f64, crossing_time: f64, start_side: f64| {
            let mut waypoints = Vec::new();
            let mut side = start_side;
            let mut t = 0.0;
            while t <= duration + crossing_time {
                waypoints.push([t, x, side * half_width]);
                side = -side;
                t += crossing_time;
            }
            ScriptedAgent {
                id,
                label: default_label(),
                waypoints,
            }
        };
        Self {
            name: "three-pedestrian-crossing".into(),
            fps: DEFAULT_FPS,
            duration,
            robot: Some(RobotSpec {
                start: [0.0, 0.0],
                goal: [30.0, 0.0],
                goal_radius: 0.5,
            }),
            agents: vec![
                pacing(1, 6.0, 5.0, 7.0, -1.0),
                pacing(2, 14.0, 6.0, 9.0, 1.0),
                pacing(3, 22.0, 4.0, 6.0, -1.0),
            ],
        }
    }
}

/// Samples the scripted scene at its frame rate. An agent is present from its
/// first waypoint time to its last.
pub fn synth_scene(spec: &SceneSpec) -> Result<ScenarioFrameSet, ScenarioError> {
    if !(spec.fps > 0.0 && spec.fps.is_finite()) {
        return Err(ScenarioError::Invalid(format!(
            "fps must be positive, got {}",
            spec.fps
        )));
    }
    if !(spec.duration >= 0.0 && spec.duration.is_finite()) {
        return Err(ScenarioError::Invalid(format!(
            "duration must be nonnegative, got {}",
            spec.duration
        )));
    }
    let mut ids = BTreeSet::new();
    for agent in &spec.agents {
        if !ids.insert(agent.id) {
            return Err(ScenarioError::Invalid(format!(
                "agent id {} used twice",
                agent.id
            )));
        }
        if agent.waypoints.is_empty() {
            return Err(ScenarioError::Invalid(format!(
                "agent {} has no waypoints",
                agent.id
            )));
        }
        if agent.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ScenarioError::Invalid(format!(
                "agent {} has a non-finite waypoint",
                agent.id
            )));
        }
        if agent.waypoints.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(ScenarioError::Invalid(format!(
                "waypoint times of agent {} are not strictly increasing",
                agent.id
            )));
        }
    }
    let last = (spec.duration * spec.fps).round() as i64;
    let mut frames: BTreeMap<i64, Vec<Observation>> = (0..=last).map(|f| (f, Vec::new())).collect();
    let eps = 1e-9;
    for agent in &spec.agents {
        let wp = &agent.waypoints;
        let (t0, t1) = (wp[0][0], wp[wp.len() - 1][0]);
        for f in 0..=last {
            let t = f as f64 / spec.fps;
            if t < t0 - eps || t > t1 + eps {
                continue;
            }
            let i = wp
                .partition_point(|w| w[0] <= t)
                .clamp(1, wp.len().max(2) - 1);
            let position = if wp.len() == 1 {
                Vec2::new(wp[0][1], wp[0][2])
            } else {
                let (a, b) = (wp[i - 1], wp[i]);
                let s = ((t - a[0]) / (b[0] - a[0])).clamp(0.0, 1.0);
                Vec2::new(a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2]))
            };
            frames
                .get_mut(&f)
                .expect("frame generated")
                .push(Observation {
                    agent_id: AgentId(agent.id),
                    position,
                    label: agent.label.clone(),
                });
        }
    }
    ScenarioFrameSet::new(spec.name.clone(), spec.fps, frames)
}
