//! Preference annotation: which rollout is preferred, and why.

mod hla;
mod oracle;
mod prompt;
mod transport;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bevrender::{render_composite, RenderConfig, RenderError};
use crate::rollout::RolloutSet;
use crate::scene::Scene;

pub use hla::{derive_hla, Direction, Hla, HlaFields, Maneuver, SpeedAction, HLA_ONE_HOT_DIM};
pub use oracle::{
    clearance_penalty, comfort_penalty, lane_departure, oracle_annotate, path_headings, progress, score_candidate, select_best,
    CandidateScore, OracleWeights, HALF_LANE, ORACLE_ID, SAFE_DISTANCE,
};
pub use prompt::{build_cot_prompt, format_response, parse_annotator_response, ParsedResponse, COT_STEPS};
pub use transport::{
    AnnotationRequest, DirectoryTransport, HttpTransport, MockTransport, Transport, TransportError,
    ANNOTATOR_URL_ENV,
};

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("response has no `HLA: ... | SELECTED: ...` line")]
    MissingStanza,
    #[error("selected index `{0}` is not an integer")]
    BadIndex(String),
    #[error("selected index {index} out of range for {n} candidates")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("unknown maneuver `{0}`")]
    UnknownManeuver(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("annotation store line {line}: {message}")]
    Store { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One annotator verdict for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub scene_id: String,
    pub selected_index: usize,
    pub hla: Hla,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub annotator_id: String,
}

/// A store entry: either an annotation or the reason a scene was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnnotationRecord {
    Annotated(Annotation),
    Skipped { scene_id: String, reason: String },
}

impl AnnotationRecord {
    pub fn scene_id(&self) -> &str {
        match self {
            AnnotationRecord::Annotated(a) => &a.scene_id,
            AnnotationRecord::Skipped { scene_id, .. } => scene_id,
        }
    }

    pub fn annotation(&self) -> Option<&Annotation> {
        match self {
            AnnotationRecord::Annotated(a) => Some(a),
            AnnotationRecord::Skipped { .. } => None,
        }
    }
}

/// Writes one JSON record per line.
pub fn save_annotations(records: &[AnnotationRecord], path: impl AsRef<Path>) -> Result<(), AnnotateError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| AnnotateError::Store {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, AnnotateError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AnnotateError::Store {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Successful annotations keyed by scene id. A later record for the same
/// scene replaces an earlier one.
pub fn annotations_by_scene(records: &[AnnotationRecord]) -> BTreeMap<String, Annotation> {
    let mut map = BTreeMap::new();
    for r in records {
        match r {
            AnnotationRecord::Annotated(a) => {
                map.insert(a.scene_id.clone(), a.clone());
            }
            AnnotationRecord::Skipped { scene_id, .. } => {
                map.remove(scene_id);
            }
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalOutcome {
    pub record: AnnotationRecord,
    /// Attempts beyond the first.
    pub retries: usize,
}

/// Sends the prompt and composite to an external annotator and parses its
/// reply. Unparseable replies and transport failures are retried up to
/// `max_retries` times; a timeout, or running out of retries, yields a
/// skipped record rather than an error.
///
/// The maneuver comes from the annotator; direction and speed are derived
/// from the selected trajectory because the answer stanza carries only the
/// maneuver.
pub fn external_annotate(
    scene: &Scene,
    rs: &RolloutSet,
    transport: &mut dyn Transport,
    render: &RenderConfig,
    annotator_id: &str,
    max_retries: usize,
) -> Result<ExternalOutcome, AnnotateError> {
    let image = render_composite(scene, rs, render)?;
    let image_ref = format!("{}.ppm", scene.scene_id);
    let prompt = build_cot_prompt(scene, &image_ref, rs);
    let image_ppm = image.to_ppm();
    let mut last_error = String::new();
    for attempt in 0..=max_retries {
        let req = AnnotationRequest {
            scene_id: scene.scene_id.clone(),
            prompt: prompt.clone(),
            image_ppm: image_ppm.clone(),
            attempt,
        };
        let text = match transport.exchange(&req) {
            Ok(t) => t,
            Err(e @ TransportError::Timeout(_)) => {
                return Ok(ExternalOutcome {
                    record: AnnotationRecord::Skipped {
                        scene_id: scene.scene_id.clone(),
                        reason: e.to_string(),
                    },
                    retries: attempt,
                })
            }
            Err(e) => {
                last_error = e.to_string();
                continue;
            }
        };
        match parse_annotator_response(&text, rs.len()) {
            Ok(p) => {
                let derived = derive_hla(&rs.candidates[p.selected_index].trajectory, scene);
                return Ok(ExternalOutcome {
                    record: AnnotationRecord::Annotated(Annotation {
                        scene_id: scene.scene_id.clone(),
                        selected_index: p.selected_index,
                        hla: Hla {
                            maneuver: p.maneuver,
                            ..derived
                        },
                        reasoning: p.reasoning,
                        annotator_id: annotator_id.to_string(),
                    }),
                    retries: attempt,
                });
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Ok(ExternalOutcome {
        record: AnnotationRecord::Skipped {
            scene_id: scene.scene_id.clone(),
            reason: format!("no valid reply after {} attempts: {last_error}", max_retries + 1),
        },
        retries: max_retries,
    })
}
