//! Chain-of-thought prompt for an external vision-language annotator and the
//! grammar of its answer.

use std::fmt::Write as _;

use super::{AnnotateError, Maneuver};
use crate::rollout::RolloutSet;
use crate::scene::{AgentKind, Scene};

/// The instruction blocks, in order.
pub const COT_STEPS: [(&str, &str); 7] = [
    (
        "Scene Understanding",
        "Describe the road layout, lane structure, intersections, crosswalks and traffic controls visible around the ego vehicle.",
    ),
    (
        "Critical Object Perception",
        "List the vehicles, pedestrians and cyclists that could influence the ego vehicle in the next five seconds.",
    ),
    (
        "Object-Scene Relations",
        "Relate each critical object to the road structure: which lane it occupies, whether it is crossing, parked or merging.",
    ),
    (
        "Dynamic Object Behavior Prediction",
        "Predict how each critical object will move over the next five seconds.",
    ),
    (
        "Potential Risk Analysis",
        "Identify collision, rule-violation and comfort risks for the ego vehicle given those predictions.",
    ),
    (
        "Driving Decision",
        "Choose the high-level action the ego vehicle should take, using exactly one maneuver from the list below.",
    ),
    (
        "Preference Trajectory Selection",
        "Select the candidate trajectory, by the index printed in its image tile, that best executes your decision safely and comfortably.",
    ),
];

fn agent_kind(k: AgentKind) -> &'static str {
    match k {
        AgentKind::Vehicle => "vehicle",
        AgentKind::Pedestrian => "pedestrian",
        AgentKind::Cyclist => "cyclist",
    }
}

/// Builds the annotator prompt. `image_ref` names the composite image sent
/// alongside (tiles are indexed 0-11, row-major).
pub fn build_cot_prompt(scene: &Scene, image_ref: &str, rs: &RolloutSet) -> String {
    let mut p = String::new();
    let _ = writeln!(
        p,
        "You are an expert driver reviewing candidate plans for an autonomous vehicle."
    );
    let _ = writeln!(
        p,
        "The attached image {image_ref} is a grid of {} bird's-eye-view tiles, indexed 0 to {} in row-major order. \
         Each tile shows the ego vehicle (green, pointing up), other agents (blue), lanes (gray), crosswalks (white) \
         and one candidate trajectory (red) over the next 5 seconds.",
        rs.candidates.len(),
        rs.candidates.len().saturating_sub(1)
    );
    p.push('\n');
    let _ = writeln!(p, "Route command: {}", scene.route_command.as_str());
    let _ = writeln!(p, "Ego speed: {:.1} m/s", scene.ego_speed);
    p.push('\n');
    let _ = writeln!(p, "Scene summary:");
    let _ = writeln!(p, "- {} map polylines", scene.roadgraph.len());
    for a in &scene.agents {
        let pos = a.last_position();
        let v = a.velocity();
        let _ = writeln!(
            p,
            "- {} {}: {:.1} m ahead, {:.1} m left, speed {:.1} m/s",
            agent_kind(a.kind),
            a.agent_id,
            pos.x,
            pos.y,
            v.norm()
        );
    }
    for l in &scene.traffic_lights {
        let _ = writeln!(
            p,
            "- traffic light at ({:.1}, {:.1}): {:?}",
            l.position.x, l.position.y, l.state
        );
    }
    p.push('\n');
    let _ = writeln!(p, "Candidates:");
    for (i, c) in rs.candidates.iter().enumerate() {
        let e = c.trajectory.last();
        let _ = writeln!(
            p,
            "- [{i}] endpoint ({:.1}, {:.1}) m, model probability {:.3}",
            e.x, e.y, c.mode_probability
        );
    }
    p.push('\n');
    let _ = writeln!(p, "Reason step by step:");
    for (i, (title, body)) in COT_STEPS.iter().enumerate() {
        let _ = writeln!(p, "{}. {title}: {body}", i + 1);
    }
    p.push('\n');
    let _ = writeln!(p, "Maneuver vocabulary:");
    for m in Maneuver::ALL {
        let _ = writeln!(p, "- {}", m.display_name());
    }
    p.push('\n');
    let _ = writeln!(
        p,
        "End your answer with exactly one final line of the form:\nHLA: <maneuver> | SELECTED: <index>"
    );
    p
}

/// Fields extracted from an annotator reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub maneuver: Maneuver,
    pub selected_index: usize,
    pub reasoning: Option<String>,
}

/// Parses the last `SELECTED:` line of a reply. Text before that line is
/// kept as reasoning.
pub fn parse_annotator_response(text: &str, n_candidates: usize) -> Result<ParsedResponse, AnnotateError> {
    let lines: Vec<&str> = text.lines().collect();
    let at = lines
        .iter()
        .rposition(|l| l.to_ascii_uppercase().contains("SELECTED:"))
        .ok_or(AnnotateError::MissingStanza)?;
    let line = lines[at];
    let upper = line.to_ascii_uppercase();
    let sel = upper.find("SELECTED:").expect("found above");
    let idx_text = line[sel + "SELECTED:".len()..].trim();
    let selected_index: usize = idx_text
        .parse()
        .map_err(|_| AnnotateError::BadIndex(idx_text.to_string()))?;
    if selected_index >= n_candidates {
        return Err(AnnotateError::IndexOutOfRange {
            index: selected_index,
            n: n_candidates,
        });
    }
    let head = &line[..sel];
    let hla_at = head.to_ascii_uppercase().find("HLA:").ok_or(AnnotateError::MissingStanza)?;
    let name = head[hla_at + 4..].trim().trim_end_matches('|').trim();
    let maneuver: Maneuver = name
        .parse()
        .map_err(|_| AnnotateError::UnknownManeuver(name.to_string()))?;
    let reasoning = lines[..at].join("\n").trim().to_string();
    Ok(ParsedResponse {
        maneuver,
        selected_index,
        reasoning: (!reasoning.is_empty()).then_some(reasoning),
    })
}

/// The answer stanza for a maneuver and index, as the prompt requests it.
pub fn format_response(maneuver: Maneuver, selected_index: usize) -> String {
    format!("HLA: {} | SELECTED: {selected_index}", maneuver.display_name())
}
