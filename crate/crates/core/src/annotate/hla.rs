//! High-level action vocabularies and the rule-based trajectory labeler.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::wrap_angle;
use crate::scene::{Scene, Trajectory};

macro_rules! vocab {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            /// Case-insensitive; spaces, hyphens and underscores are interchangeable.
            fn from_str(s: &str) -> Result<Self, String> {
                let norm = normalize(s);
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| normalize(v.as_str()) == norm)
                    .ok_or_else(|| format!("unknown {} {s:?}", stringify!($name)))
            }
        }
    };
}

fn normalize(s: &str) -> String {
    s.trim()
        .chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-'))
        .flat_map(char::to_lowercase)
        .collect()
}

vocab!(
    /// Maneuver-level intent.
    Maneuver {
        MoveToStop => "move_to_stop",
        StopToMove => "stop_to_move",
        LeftTurn => "left_turn",
        RightTurn => "right_turn",
        Backup => "backup",
        LeftLaneChange => "left_lane_change",
        RightLaneChange => "right_lane_change",
        RemainStopped => "remain_stopped",
        UTurn => "u_turn",
        Pullover => "pullover",
        LaneFollowing => "lane_following",
    }
);

vocab!(
    Direction {
        Stop => "stop",
        GoStraight => "go_straight",
        TurnLeft => "turn_left",
        TurnRight => "turn_right",
        LeftLaneChange => "left_lane_change",
        RightLaneChange => "right_lane_change",
    }
);

vocab!(
    SpeedAction {
        MaintainSpeed => "maintain_speed",
        Accelerate => "accelerate",
        Decelerate => "decelerate",
        HardBrake => "hard_brake",
    }
);

impl Maneuver {
    /// Human-readable form used in prompts, e.g. "Lane following".
    pub fn display_name(self) -> String {
        let s = self.as_str().replace('_', " ");
        match self {
            Maneuver::UTurn => "U-turn".into(),
            _ => {
                let mut c = s.chars();
                c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hla {
    pub maneuver: Maneuver,
    pub direction: Direction,
    pub speed: SpeedAction,
}

/// Which HLA vocabularies participate in a head set or input encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HlaFields {
    pub maneuver: bool,
    pub direction: bool,
    pub speed: bool,
}

impl HlaFields {
    pub const ALL: HlaFields = HlaFields {
        maneuver: true,
        direction: true,
        speed: true,
    };
    pub const MANEUVER: HlaFields = HlaFields {
        maneuver: true,
        direction: false,
        speed: false,
    };
    pub const DIRECTION_SPEED: HlaFields = HlaFields {
        maneuver: false,
        direction: true,
        speed: true,
    };

    pub fn any(self) -> bool {
        self.maneuver || self.direction || self.speed
    }
}

impl Default for HlaFields {
    fn default() -> Self {
        Self::ALL
    }
}

pub const HLA_ONE_HOT_DIM: usize = 11 + 6 + 4;

impl Hla {
    /// Concatenated one-hot of the three fields; disabled fields stay zero.
    pub fn one_hot(&self, fields: HlaFields) -> [f64; HLA_ONE_HOT_DIM] {
        let mut v = [0.0; HLA_ONE_HOT_DIM];
        if fields.maneuver {
            v[self.maneuver.index()] = 1.0;
        }
        if fields.direction {
            v[11 + self.direction.index()] = 1.0;
        }
        if fields.speed {
            v[17 + self.speed.index()] = 1.0;
        }
        v
    }
}

impl fmt::Display for Hla {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.maneuver, self.direction, self.speed)
    }
}

const STOPPED: f64 = 0.3;
const STRAIGHT_DEG: f64 = 15.0;
const LANE_CHANGE_OFFSET: f64 = 2.5;
const U_TURN_DEG: f64 = 150.0;
const BACKUP_X: f64 = -1.0;
const PULLOVER_OFFSET: f64 = 1.5;
const HARD_BRAKE_DECEL: f64 = 4.0;

/// Heading of the last step with noticeable motion, relative to `+x`.
fn final_heading(traj: &Trajectory) -> f64 {
    let mut prev = crate::scene::Point::ORIGIN;
    let mut heading = 0.0;
    for &p in &traj.points {
        let d = p - prev;
        if d.norm() > 1e-3 {
            heading = d.y.atan2(d.x);
        }
        prev = p;
    }
    heading
}

fn end_speed(traj: &Trajectory) -> f64 {
    match traj.points.as_slice() {
        [] => 0.0,
        [p] => p.norm() / traj.dt,
        [.., a, b] => a.dist(*b) / traj.dt,
    }
}

/// Labels a candidate ego trajectory (in the ego frame) with an HLA triple.
/// Total on finite input: every branch yields a vocabulary member.
pub fn derive_hla(traj: &Trajectory, scene: &Scene) -> Hla {
    let v0 = scene.ego_speed.max(0.0);
    let v1 = end_speed(traj);
    let end = traj.points.last().copied().unwrap_or_default();
    let dtheta = wrap_angle(final_heading(traj)).to_degrees();
    let horizon = (traj.len().max(1) as f64) * traj.dt;

    let direction = if v1 < STOPPED {
        Direction::Stop
    } else if dtheta.abs() < STRAIGHT_DEG {
        if end.y > LANE_CHANGE_OFFSET {
            Direction::LeftLaneChange
        } else if end.y < -LANE_CHANGE_OFFSET {
            Direction::RightLaneChange
        } else {
            Direction::GoStraight
        }
    } else if dtheta > 0.0 {
        Direction::TurnLeft
    } else {
        Direction::TurnRight
    };

    let speed = if v0 < STOPPED {
        if v1 >= STOPPED {
            SpeedAction::Accelerate
        } else {
            SpeedAction::MaintainSpeed
        }
    } else {
        let ratio = v1 / v0;
        let decel = (v0 - v1) / horizon;
        if ratio < 0.5 && decel > HARD_BRAKE_DECEL {
            SpeedAction::HardBrake
        } else if ratio < 0.9 {
            SpeedAction::Decelerate
        } else if ratio > 1.1 {
            SpeedAction::Accelerate
        } else {
            SpeedAction::MaintainSpeed
        }
    };

    let maneuver = if v0 < STOPPED && v1 < STOPPED {
        if end.x < BACKUP_X {
            Maneuver::Backup
        } else {
            Maneuver::RemainStopped
        }
    } else if v1 < STOPPED {
        if end.y < -PULLOVER_OFFSET {
            Maneuver::Pullover
        } else {
            Maneuver::MoveToStop
        }
    } else if end.x < BACKUP_X {
        Maneuver::Backup
    } else if dtheta.abs() > U_TURN_DEG {
        Maneuver::UTurn
    } else if v0 < STOPPED {
        Maneuver::StopToMove
    } else {
        match direction {
            Direction::TurnLeft => Maneuver::LeftTurn,
            Direction::TurnRight => Maneuver::RightTurn,
            Direction::LeftLaneChange => Maneuver::LeftLaneChange,
            Direction::RightLaneChange => Maneuver::RightLaneChange,
            Direction::Stop | Direction::GoStraight => Maneuver::LaneFollowing,
        }
    };

    Hla {
        maneuver,
        direction,
        speed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{scene_with_speed, GeneratorConfig, Point, Template};
    use proptest::prelude::*;

    fn scene(speed: f64) -> Scene {
        let mut s = scene_with_speed("t", Template::StraightCruise, 5.0, 1, &GeneratorConfig::default()).scene;
        s.ego_speed = speed;
        s
    }

    fn traj(points: Vec<Point>) -> Trajectory {
        Trajectory::new(0.5, points)
    }

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(Maneuver::ALL.len(), 11);
        assert_eq!(Direction::ALL.len(), 6);
        assert_eq!(SpeedAction::ALL.len(), 4);
    }

    #[test]
    fn parsing_is_case_and_separator_insensitive() {
        assert_eq!("Lane following".parse::<Maneuver>(), Ok(Maneuver::LaneFollowing));
        assert_eq!("U-turn".parse::<Maneuver>(), Ok(Maneuver::UTurn));
        assert_eq!("HARD_BRAKE".parse::<SpeedAction>(), Ok(SpeedAction::HardBrake));
        assert!("Warp speed".parse::<Maneuver>().is_err());
        for m in Maneuver::ALL {
            assert_eq!(m.display_name().parse::<Maneuver>(), Ok(*m));
        }
    }

    #[test]
    fn stationary_remains_stopped() {
        let h = derive_hla(&traj(vec![Point::ORIGIN; 10]), &scene(0.0));
        assert_eq!(
            h,
            Hla {
                maneuver: Maneuver::RemainStopped,
                direction: Direction::Stop,
                speed: SpeedAction::MaintainSpeed
            }
        );
    }

    #[test]
    fn constant_speed_straight_is_lane_following() {
        let t = traj((1..=10).map(|k| Point::new(5.0 * k as f64, 0.0)).collect());
        let h = derive_hla(&t, &scene(10.0));
        assert_eq!(
            (h.direction, h.speed, h.maneuver),
            (Direction::GoStraight, SpeedAction::MaintainSpeed, Maneuver::LaneFollowing)
        );
    }

    #[test]
    fn quarter_circle_left_is_a_left_turn() {
        // radius 10 m, 90 degrees covered at constant speed over 10 steps
        let r = 10.0;
        let pts = (1..=10)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 / 10.0;
                Point::new(r * a.sin(), r * (1.0 - a.cos()))
            })
            .collect();
        let speed = r * std::f64::consts::FRAC_PI_2 / 5.0;
        let h = derive_hla(&traj(pts), &scene(speed));
        assert_eq!(h.direction, Direction::TurnLeft);
        assert_eq!(h.maneuver, Maneuver::LeftTurn);
        assert_eq!(h.speed, SpeedAction::MaintainSpeed);
    }

    #[test]
    fn braking_to_a_halt_is_move_to_stop_or_hard_brake() {
        let mut x = 0.0;
        let mut v: f64 = 5.0;
        let pts = (0..10)
            .map(|_| {
                v = (v - 1.0).max(0.0);
                x += v * 0.5;
                Point::new(x, 0.0)
            })
            .collect();
        let h = derive_hla(&traj(pts), &scene(5.0));
        assert_eq!(h.maneuver, Maneuver::MoveToStop);
        assert_eq!(h.direction, Direction::Stop);
        assert_eq!(h.speed, SpeedAction::Decelerate);
    }

    #[test]
    fn lateral_shift_is_a_lane_change() {
        let pts = (1..=10)
            .map(|k| {
                let u = k as f64 / 10.0;
                Point::new(2.5 * k as f64, 3.5 * (10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5)))
            })
            .collect();
        let h = derive_hla(&traj(pts), &scene(5.0));
        assert_eq!(h.direction, Direction::LeftLaneChange);
        assert_eq!(h.maneuver, Maneuver::LeftLaneChange);
    }

    #[test]
    fn one_hot_respects_enabled_fields() {
        let h = Hla {
            maneuver: Maneuver::Pullover,
            direction: Direction::TurnLeft,
            speed: SpeedAction::Accelerate,
        };
        let all = h.one_hot(HlaFields::ALL);
        assert_eq!(all.iter().sum::<f64>(), 3.0);
        assert_eq!(all[Maneuver::Pullover.index()], 1.0);
        let ds = h.one_hot(HlaFields::DIRECTION_SPEED);
        assert_eq!(ds[..11].iter().sum::<f64>(), 0.0);
        assert_eq!(ds.iter().sum::<f64>(), 2.0);
    }

    proptest! {
        #[test]
        fn derive_hla_is_total(steps in proptest::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 10), v0 in 0.0f64..15.0) {
            let mut p = Point::ORIGIN;
            let pts = steps.iter().map(|&(dx, dy)| { p = p + Point::new(dx, dy); p }).collect();
            let h = derive_hla(&traj(pts), &scene(v0));
            prop_assert!(Maneuver::ALL.contains(&h.maneuver));
            prop_assert!(Direction::ALL.contains(&h.direction));
            prop_assert!(SpeedAction::ALL.contains(&h.speed));
        }
    }
}
