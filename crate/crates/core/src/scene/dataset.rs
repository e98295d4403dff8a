//! Line-delimited JSON dataset files, one scene per line.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AgentTrack, LabeledScene, LanePolyline, RaterLabel, RouteCommand, Scene, SceneError,
    TrafficLight, Trajectory,
};

/// Six-decimal float encoding.
///
/// Values are written with exactly six decimals. Generated data is rounded to
/// the same grid on creation, so a save/load cycle reproduces it bit for bit.
pub(crate) mod fixed6 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::value::RawValue;

    pub fn round(x: f64) -> f64 {
        (x * 1e6).round() / 1e6
    }

    pub struct Fixed(pub f64);

    impl Serialize for Fixed {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            if !self.0.is_finite() {
                return Err(serde::ser::Error::custom(format!(
                    "cannot serialize non-finite value {}",
                    self.0
                )));
            }
            let raw = RawValue::from_string(format!("{:.6}", self.0))
                .map_err(serde::ser::Error::custom)?;
            raw.serialize(s)
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        Fixed(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d)
    }
}

#[derive(Serialize)]
struct RecordRef<'a> {
    scene_id: &'a str,
    roadgraph: &'a [LanePolyline],
    agents: &'a [AgentTrack],
    traffic_lights: &'a [TrafficLight],
    route_command: RouteCommand,
    #[serde(with = "fixed6")]
    ego_speed: f64,
    ego_history: &'a Trajectory,
    ego_future: &'a Trajectory,
    rater_label: &'a RaterLabel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene_id: String,
    roadgraph: Vec<LanePolyline>,
    agents: Vec<AgentTrack>,
    traffic_lights: Vec<TrafficLight>,
    route_command: RouteCommand,
    ego_speed: f64,
    ego_history: Trajectory,
    ego_future: Trajectory,
    rater_label: RaterLabel,
}

impl Serialize for LabeledScene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let sc = &self.scene;
        RecordRef {
            scene_id: &sc.scene_id,
            roadgraph: &sc.roadgraph,
            agents: &sc.agents,
            traffic_lights: &sc.traffic_lights,
            route_command: sc.route_command,
            ego_speed: sc.ego_speed,
            ego_history: &sc.ego_history,
            ego_future: &sc.ego_future,
            rater_label: &self.rater_label,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabeledScene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = Record::deserialize(d)?;
        Ok(LabeledScene {
            scene: Scene {
                scene_id: r.scene_id,
                roadgraph: r.roadgraph,
                agents: r.agents,
                traffic_lights: r.traffic_lights,
                route_command: r.route_command,
                ego_speed: r.ego_speed,
                ego_history: r.ego_history,
                ego_future: r.ego_future,
            },
            rater_label: r.rater_label,
        })
    }
}

pub fn write_dataset<W: Write>(scenes: &[LabeledScene], mut w: W) -> Result<(), SceneError> {
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| SceneError::Invalid {
            scene_id: s.scene.scene_id.clone(),
            reason: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records until EOF. Blank lines are skipped; line numbers are 1-based.
pub fn read_dataset<R: Read>(r: R) -> Result<Vec<LabeledScene>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabeledScene = serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(scenes: &[LabeledScene], path: impl AsRef<Path>) -> Result<(), SceneError> {
    let mut buf = Vec::new();
    write_dataset(scenes, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledScene>, SceneError> {
    read_dataset(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_corpus, GeneratorConfig};

    #[test]
    fn save_then_load_is_identity() {
        let scenes = generate_corpus(3, 10, &GeneratorConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&scenes, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, scenes);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read_dataset(&b""[..]).unwrap().is_empty());
        assert!(read_dataset(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_reports_its_line() {
        let scenes = generate_corpus(3, 3, &GeneratorConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&scenes, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let broken = format!("{}\n{}\n{}\n", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
        match read_dataset(broken.as_bytes()) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn floats_are_written_with_six_decimals() {
        let scenes = generate_corpus(1, 1, &GeneratorConfig::default()).unwrap();
        let text = serde_json::to_string(&scenes[0]).unwrap();
        assert!(text.contains("\"dt\":0.500000"), "{}", &text[..200]);
        assert!(text.starts_with("{\"scene_id\":"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let scenes = generate_corpus(1, 1, &GeneratorConfig::default()).unwrap();
        let text = serde_json::to_string(&scenes[0]).unwrap();
        let bad = text.replacen("{\"scene_id\"", "{\"bogus\":1,\"scene_id\"", 1);
        assert!(matches!(
            read_dataset(bad.as_bytes()),
            Err(SceneError::Parse { line: 1, .. })
        ));
    }
}
