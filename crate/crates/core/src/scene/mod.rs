//! Scene and trajectory data model.
//!
//! Everything lives in the ego frame: `+x` forward, `+y` left, origin at the
//! ego position at the last observed step. Histories end at the origin;
//! futures start one step after it.

mod dataset;
mod generate;

pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use generate::{generate_corpus, scene_with_speed, GeneratorConfig, Template, EGO_LENGTH, EGO_WIDTH};

pub(crate) use dataset::fixed6;

use serde::{Deserialize, Serialize};

/// Sampling grid shared by histories and futures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    /// Seconds between consecutive points.
    pub dt: f64,
    /// Number of observed points, the last one at t = 0.
    pub history_steps: usize,
    /// Number of predicted points, at t = dt, 2 dt, ...
    pub horizon_steps: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        // 4 s of observation and 5 s of horizon at 2 Hz.
        Self {
            dt: 0.5,
            history_steps: 8,
            horizon_steps: 10,
        }
    }
}

impl TimeGrid {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SceneError::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.horizon_steps == 0 {
            return Err(SceneError::Config("horizon must have at least one step".into()));
        }
        if self.history_steps < 2 {
            return Err(SceneError::Config(
                "history needs at least two steps to define a velocity".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon_seconds(&self) -> f64 {
        self.dt * self.horizon_steps as f64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid scene {scene_id}: {reason}")]
    Invalid { scene_id: String, reason: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeTuple;
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&fixed6::Fixed(self.x))?;
        t.serialize_element(&fixed6::Fixed(self.y))?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y] = <[f64; 2]>::deserialize(d)?;
        Ok(Point { x, y })
    }
}

/// Fixed-rate sequence of positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    #[serde(with = "fixed6")]
    pub dt: f64,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(dt: f64, points: Vec<Point>) -> Self {
        Self { dt, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.dt.is_finite() && self.points.iter().all(|p| p.is_finite())
    }

    pub fn last(&self) -> Point {
        self.points.last().copied().unwrap_or_default()
    }

    /// Point at time `t` seconds after the trajectory's reference instant,
    /// where point `k` sits at `(k + 1) * dt` (future convention).
    pub fn point_at_time(&self, t: f64) -> Option<Point> {
        let idx = (t / self.dt).round() as isize - 1;
        if idx < 0 {
            return None;
        }
        self.points.get(idx as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Lane,
    Crosswalk,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanePolyline {
    pub points: Vec<Point>,
    pub kind: LaneKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficLight {
    pub position: Point,
    pub state: LightState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteCommand {
    GoStraight,
    TurnLeft,
    TurnRight,
}

impl RouteCommand {
    pub const ALL: [RouteCommand; 3] = [
        RouteCommand::GoStraight,
        RouteCommand::TurnLeft,
        RouteCommand::TurnRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RouteCommand::GoStraight => "go_straight",
            RouteCommand::TurnLeft => "turn_left",
            RouteCommand::TurnRight => "turn_right",
        }
    }

    /// Unit heading, in the ego frame, of the road the route leaves on.
    pub fn direction(self) -> Point {
        match self {
            RouteCommand::GoStraight => Point::new(1.0, 0.0),
            RouteCommand::TurnLeft => Point::new(0.0, 1.0),
            RouteCommand::TurnRight => Point::new(0.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    #[serde(with = "fixed6")]
    pub length: f64,
    #[serde(with = "fixed6")]
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub agent_id: String,
    pub kind: AgentKind,
    pub history: Trajectory,
    pub extent: Extent,
}

impl AgentTrack {
    /// Velocity from the last two observed points.
    pub fn velocity(&self) -> Point {
        let n = self.history.points.len();
        if n < 2 {
            return Point::ORIGIN;
        }
        (self.history.points[n - 1] - self.history.points[n - 2]) * (1.0 / self.history.dt)
    }

    /// Heading of travel; stationary agents are assumed aligned with `+x`.
    pub fn heading(&self) -> f64 {
        let pts = &self.history.points;
        for w in pts.windows(2).rev() {
            let d = w[1] - w[0];
            if d.norm() > 1e-3 {
                return d.y.atan2(d.x);
            }
        }
        0.0
    }

    pub fn last_position(&self) -> Point {
        self.history.last()
    }

    /// Constant-velocity extrapolation `t` seconds past the last observation.
    pub fn predict(&self, t: f64) -> Point {
        self.last_position() + self.velocity() * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub roadgraph: Vec<LanePolyline>,
    pub agents: Vec<AgentTrack>,
    pub traffic_lights: Vec<TrafficLight>,
    pub route_command: RouteCommand,
    pub ego_speed: f64,
    pub ego_history: Trajectory,
    pub ego_future: Trajectory,
}

impl Scene {
    /// Checks the grid and size invariants. `max_agents` counts the ego.
    pub fn validate(&self, grid: &TimeGrid, max_agents: usize) -> Result<(), SceneError> {
        let bad = |reason: String| SceneError::Invalid {
            scene_id: self.scene_id.clone(),
            reason,
        };
        if self.ego_history.len() != grid.history_steps {
            return Err(bad(format!(
                "ego_history has {} points, expected {}",
                self.ego_history.len(),
                grid.history_steps
            )));
        }
        if self.ego_future.len() != grid.horizon_steps {
            return Err(bad(format!(
                "ego_future has {} points, expected {}",
                self.ego_future.len(),
                grid.horizon_steps
            )));
        }
        if self.agents.len() + 1 > max_agents {
            return Err(bad(format!(
                "{} agents plus ego exceeds the maximum of {max_agents}",
                self.agents.len()
            )));
        }
        if !self.ego_speed.is_finite() || !self.ego_history.is_finite() || !self.ego_future.is_finite()
        {
            return Err(bad("non-finite ego state".into()));
        }
        for a in &self.agents {
            if a.history.len() != grid.history_steps || a.history.dt != grid.dt {
                return Err(bad(format!("agent {} is off the history grid", a.agent_id)));
            }
            if !a.history.is_finite() {
                return Err(bad(format!("agent {} has non-finite history", a.agent_id)));
            }
        }
        Ok(())
    }

    /// Ego heading at the last observed step.
    pub fn ego_heading(&self) -> f64 {
        let pts = &self.ego_history.points;
        for w in pts.windows(2).rev() {
            let d = w[1] - w[0];
            if d.norm() > 1e-3 {
                return d.y.atan2(d.x);
            }
        }
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatedTrajectory {
    pub trajectory: Trajectory,
    #[serde(with = "fixed6")]
    pub score: f64,
}

/// Up to three reference trajectories, most preferred first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterLabel {
    pub rated: Vec<RatedTrajectory>,
}

impl RaterLabel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.rated.is_empty() || self.rated.len() > 3 {
            return Err(SceneError::Config(format!(
                "rater label must hold 1 to 3 trajectories, got {}",
                self.rated.len()
            )));
        }
        if let Some(r) = self.rated.iter().find(|r| !(0.0..=10.0).contains(&r.score)) {
            return Err(SceneError::Config(format!("rater score {} outside [0, 10]", r.score)));
        }
        Ok(())
    }

    pub fn top(&self) -> &RatedTrajectory {
        &self.rated[0]
    }
}

/// A scene together with its rater preferences; one dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    pub rater_label: RaterLabel,
}
