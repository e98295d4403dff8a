//! Per-entity feature vectors fed to the scene encoder.
//!
//! Every entity becomes one row. Positions are divided by a position scale
//! and velocities by a speed scale so that typical inputs are O(1).

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::annotate::{Hla, HlaFields, HLA_ONE_HOT_DIM};
use crate::geometry::resample;
use crate::scene::{AgentKind, LaneKind, LightState, Point, Scene, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Points each lane polyline is resampled to.
    pub lane_points: usize,
    /// Observed steps per history track.
    pub history_steps: usize,
    pub position_scale: f64,
    pub speed_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            lane_points: 8,
            history_steps: 8,
            position_scale: 20.0,
            speed_scale: 5.0,
        }
    }
}

impl FeatureConfig {
    pub fn lane_dim(&self) -> usize {
        2 * self.lane_points + 3
    }

    pub fn agent_dim(&self) -> usize {
        2 * self.history_steps + 2 + 3 + 2
    }

    pub const LIGHT_DIM: usize = 5;
    pub const ROUTE_DIM: usize = 3;
    pub const SPEED_DIM: usize = 1;
    pub const HLA_DIM: usize = HLA_ONE_HOT_DIM;

    pub fn ego_dim(&self) -> usize {
        2 * self.history_steps + 1
    }
}

/// Encoder inputs grouped by entity kind; each group has its own projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub lanes: Tensor,
    pub agents: Tensor,
    pub lights: Tensor,
    pub ego: Tensor,
    pub route: Tensor,
    pub speed: Tensor,
    pub hla: Option<Tensor>,
}

impl SceneFeatures {
    pub fn token_count(&self) -> usize {
        self.lanes.shape[0]
            + self.agents.shape[0]
            + self.lights.shape[0]
            + 3
            + usize::from(self.hla.is_some())
    }
}

fn one_hot<const N: usize>(i: usize) -> [f64; N] {
    let mut v = [0.0; N];
    v[i] = 1.0;
    v
}

fn push_track(out: &mut Vec<f64>, traj: &Trajectory, steps: usize, scale: f64) {
    // left-pad short tracks with their first point; keep the most recent steps
    let pts = &traj.points;
    let first = pts.first().copied().unwrap_or(Point::ORIGIN);
    let skip = pts.len().saturating_sub(steps);
    for _ in pts.len()..steps {
        out.extend([first.x / scale, first.y / scale]);
    }
    for p in &pts[skip..] {
        out.extend([p.x / scale, p.y / scale]);
    }
}

fn matrix(rows: Vec<Vec<f64>>, cols: usize) -> Tensor {
    let n = rows.len();
    Tensor::from_vec(&[n, cols], rows.concat()).expect("feature row widths")
}

pub fn scene_features(scene: &Scene, cfg: &FeatureConfig, hla: Option<(&Hla, HlaFields)>) -> SceneFeatures {
    let ps = cfg.position_scale;
    let vs = cfg.speed_scale;

    let lanes = scene
        .roadgraph
        .iter()
        .map(|l| {
            let mut row = Vec::with_capacity(cfg.lane_dim());
            for p in resample(&l.points, cfg.lane_points) {
                row.extend([p.x / ps, p.y / ps]);
            }
            let k = match l.kind {
                LaneKind::Lane => 0,
                LaneKind::Crosswalk => 1,
                LaneKind::Boundary => 2,
            };
            row.extend(one_hot::<3>(k));
            row
        })
        .collect();

    let agents = scene
        .agents
        .iter()
        .map(|a| {
            let mut row = Vec::with_capacity(cfg.agent_dim());
            push_track(&mut row, &a.history, cfg.history_steps, ps);
            let v = a.velocity();
            row.extend([v.x / vs, v.y / vs]);
            let k = match a.kind {
                AgentKind::Vehicle => 0,
                AgentKind::Pedestrian => 1,
                AgentKind::Cyclist => 2,
            };
            row.extend(one_hot::<3>(k));
            row.extend([a.extent.length / vs, a.extent.width / vs]);
            row
        })
        .collect();

    let lights = scene
        .traffic_lights
        .iter()
        .map(|l| {
            let k = match l.state {
                LightState::Red => 0,
                LightState::Yellow => 1,
                LightState::Green => 2,
            };
            let mut row = vec![l.position.x / ps, l.position.y / ps];
            row.extend(one_hot::<3>(k));
            row
        })
        .collect();

    let mut ego = Vec::with_capacity(cfg.ego_dim());
    push_track(&mut ego, &scene.ego_history, cfg.history_steps, ps);
    ego.push(scene.ego_speed / vs);

    let route_idx = crate::scene::RouteCommand::ALL
        .iter()
        .position(|&r| r == scene.route_command)
        .expect("route in vocabulary");

    SceneFeatures {
        lanes: matrix(lanes, cfg.lane_dim()),
        agents: matrix(agents, cfg.agent_dim()),
        lights: matrix(lights, FeatureConfig::LIGHT_DIM),
        ego: matrix(vec![ego], cfg.ego_dim()),
        route: matrix(vec![one_hot::<3>(route_idx).to_vec()], 3),
        speed: matrix(vec![vec![scene.ego_speed / vs]], 1),
        hla: hla.map(|(h, f)| matrix(vec![h.one_hot(f).to_vec()], FeatureConfig::HLA_DIM)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{Direction, Maneuver, SpeedAction};
    use crate::scene::{generate_corpus, GeneratorConfig, LanePolyline};

    #[test]
    fn one_lane_no_agents_counts_four_tokens() {
        let mut s = generate_corpus(3, 1, &GeneratorConfig::default()).unwrap()[0].scene.clone();
        s.agents.clear();
        s.traffic_lights.clear();
        s.roadgraph = vec![LanePolyline {
            points: vec![Point::new(0.0, 0.0), Point::new(30.0, 0.0)],
            kind: LaneKind::Lane,
        }];
        let f = scene_features(&s, &FeatureConfig::default(), None);
        assert_eq!(f.token_count(), 1 + 1 + 2);
        let h = Hla {
            maneuver: Maneuver::LaneFollowing,
            direction: Direction::GoStraight,
            speed: SpeedAction::MaintainSpeed,
        };
        let fh = scene_features(&s, &FeatureConfig::default(), Some((&h, HlaFields::ALL)));
        assert_eq!(fh.token_count(), f.token_count() + 1);
    }

    #[test]
    fn widths_match_config() {
        let cfg = FeatureConfig::default();
        for ls in generate_corpus(5, 10, &GeneratorConfig::default()).unwrap() {
            let f = scene_features(&ls.scene, &cfg, None);
            assert_eq!(f.lanes.cols(), cfg.lane_dim());
            assert_eq!(f.ego.data.len(), cfg.ego_dim());
            if !ls.scene.agents.is_empty() {
                assert_eq!(f.agents.cols(), cfg.agent_dim());
            }
            assert!(f.lanes.is_finite() && f.agents.is_finite());
        }
    }
}
