//! Displacement error, trust-region rater feedback score and the evaluation
//! reports built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotate::Hla;
use crate::geometry::mean_distance;
use crate::nnet::ForecastModel;
use crate::rollout::{central_mode, most_likely, rollout_scene, RolloutConfig, RolloutError, RolloutSet};
use crate::scene::{LabeledScene, Point, RaterLabel, Scene, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("trajectory length {found} does not match {expected}")]
    Length { expected: usize, found: usize },
    #[error("time step {found} does not match {expected}")]
    TimeStep { expected: f64, found: f64 },
    #[error("invalid metric config: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Mean Euclidean distance between corresponding points.
pub fn ade(pred: &Trajectory, target: &Trajectory) -> Result<f64, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::Length {
            expected: target.len(),
            found: pred.len(),
        });
    }
    if pred.dt != target.dt {
        return Err(MetricsError::TimeStep {
            expected: target.dt,
            found: pred.dt,
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(mean_distance(&pred.points, &target.points))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    /// Seconds into the future.
    pub time: f64,
    /// Multiplier on the base thresholds.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// Lateral half-width at scale 1, meters.
    pub lat_base: f64,
    /// Longitudinal half-length at scale 1, meters.
    pub lon_base: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Score factor per threshold-multiple of excess deviation.
    pub decay_rate: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            lat_base: 1.0,
            lon_base: 2.0,
            checkpoints: vec![Checkpoint { time: 3.0, scale: 1.0 }, Checkpoint { time: 5.0, scale: 1.5 }],
            decay_rate: 0.1,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: &str| Err(MetricsError::Config(m.to_string()));
        if !(self.lat_base > 0.0 && self.lon_base > 0.0) {
            return bad("trust-region thresholds must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return bad("decay_rate must lie in (0, 1)");
        }
        if self.checkpoints.is_empty() || self.checkpoints.iter().any(|c| !(c.time > 0.0 && c.scale > 0.0)) {
            return bad("checkpoints need positive times and scales");
        }
        Ok(())
    }
}

/// Unit direction of motion of `traj` around step `idx`, falling back to
/// the ego x axis where the trajectory is stationary.
fn tangent(traj: &Trajectory, idx: usize) -> Point {
    let p = &traj.points;
    let prev = if idx == 0 { Point::ORIGIN } else { p[idx - 1] };
    let next = if idx + 1 < p.len() { p[idx + 1] } else { p[idx] };
    let d = next - prev;
    let n = d.norm();
    if n < 1e-9 {
        Point::new(1.0, 0.0)
    } else {
        d * (1.0 / n)
    }
}

fn step_index(traj: &Trajectory, t: f64) -> Option<usize> {
    let i = (t / traj.dt).round() as isize - 1;
    (i >= 0 && (i as usize) < traj.len()).then_some(i as usize)
}

/// Largest normalized threshold excess of `pred` against one rated
/// trajectory over all checkpoints; 0 inside the trust region.
pub fn trust_region_excess(pred: &Trajectory, rated: &Trajectory, trc: &TrustRegionConfig) -> Result<f64, MetricsError> {
    let mut worst: f64 = 0.0;
    for c in &trc.checkpoints {
        let (Some(ip), Some(ir)) = (step_index(pred, c.time), step_index(rated, c.time)) else {
            return Err(MetricsError::Length {
                expected: (c.time / rated.dt).round() as usize,
                found: pred.len().min(rated.len()),
            });
        };
        let d = pred.points[ip] - rated.points[ir];
        let u = tangent(rated, ir);
        let lon = d.x * u.x + d.y * u.y;
        let lat = -d.x * u.y + d.y * u.x;
        let (tlat, tlon) = (trc.lat_base * c.scale, trc.lon_base * c.scale);
        let e = ((lat.abs() - tlat).max(0.0) / tlat).max((lon.abs() - tlon).max(0.0) / tlon);
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Rater feedback score of one prediction, in `[0, 10]`.
pub fn rfs(pred: &Trajectory, label: &RaterLabel, trc: &TrustRegionConfig) -> Result<f64, MetricsError> {
    trc.validate()?;
    if label.rated.is_empty() {
        return Err(MetricsError::Config("rater label has no rated trajectories".into()));
    }
    let mut best: f64 = 0.0;
    for r in &label.rated {
        let e = trust_region_excess(pred, &r.trajectory, trc)?;
        best = best.max(r.score * trc.decay_rate.powf(e));
    }
    Ok(best.clamp(0.0, 10.0))
}

/// Metrics of one scene's aggregated rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub rfs: f64,
    pub avg_rfs: f64,
    pub ml_rfs: f64,
    pub ade: f64,
}

pub fn scene_metrics(ls: &LabeledScene, rs: &RolloutSet, trc: &TrustRegionConfig) -> Result<SceneMetrics, MetricsError> {
    if rs.is_empty() {
        return Err(MetricsError::Config(format!("scene {} has no candidates", rs.scene_id)));
    }
    let label = &ls.rater_label;
    let scores = rs
        .candidates
        .iter()
        .map(|c| rfs(&c.trajectory, label, trc))
        .collect::<Result<Vec<_>, _>>()?;
    let central = central_mode(rs);
    Ok(SceneMetrics {
        scene_id: ls.scene.scene_id.clone(),
        rfs: scores[central],
        avg_rfs: scores.iter().sum::<f64>() / scores.len() as f64,
        ml_rfs: scores[most_likely(rs)],
        ade: ade(&rs.candidates[central].trajectory, &label.top().trajectory)?,
    })
}

/// Dataset means of the per-scene metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub rfs: f64,
    pub avg_rfs: f64,
    pub ml_rfs: f64,
    pub ade: f64,
}

impl EvalReport {
    pub fn from_scenes(per_scene: &[SceneMetrics]) -> Self {
        // sum in scene-id order so the means do not depend on dataset order
        let mut sorted: Vec<&SceneMetrics> = per_scene.iter().collect();
        sorted.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        let n = sorted.len().max(1) as f64;
        let mean = |f: fn(&SceneMetrics) -> f64| sorted.iter().map(|s| f(s)).sum::<f64>() / n;
        Self {
            scenes: sorted.len(),
            rfs: mean(|s| s.rfs),
            avg_rfs: mean(|s| s.avg_rfs),
            ml_rfs: mean(|s| s.ml_rfs),
            ade: mean(|s| s.ade),
        }
    }
}

/// Rolls out `model` on every scene and scores the result. `hla` supplies
/// conditioning inputs for models trained with them.
pub fn evaluate_model(
    model: &ForecastModel,
    model_id: &str,
    data: &[LabeledScene],
    hla: Option<&BTreeMap<String, Hla>>,
    rollout: &RolloutConfig,
    base_seed: u64,
    trc: &TrustRegionConfig,
) -> Result<(EvalReport, Vec<SceneMetrics>), MetricsError> {
    trc.validate()?;
    let mut per_scene = Vec::with_capacity(data.len());
    for ls in data {
        let h = hla.and_then(|m| m.get(&ls.scene.scene_id));
        let rs = rollout_scene(model, model_id, &ls.scene, h, rollout, base_seed)?;
        per_scene.push(scene_metrics(ls, &rs, trc)?);
    }
    Ok((EvalReport::from_scenes(&per_scene), per_scene))
}

/// Side-by-side metrics table, one row per named report.
pub fn format_eval_table(rows: &[(String, EvalReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}", "Method", "RFS", "avgRFS", "mlRFS", "ADE");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            name, r.rfs, r.avg_rfs, r.ml_rfs, r.ade
        );
    }
    s
}

/// Most-likely candidate against the annotator's pick, averaged over scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scenes: usize,
    /// Scenes the annotator declined.
    pub skipped: usize,
    pub most_likely_rfs: f64,
    pub selected_rfs: f64,
    pub rfs_change_pct: f64,
    pub most_likely_ade: f64,
    pub selected_ade: f64,
    pub ade_change_pct: f64,
}

fn pct(from: f64, to: f64) -> f64 {
    if from == to {
        0.0
    } else {
        100.0 * (to - from) / from.abs()
    }
}

/// Compares annotator selections with the most-likely candidate. The
/// annotator returns a candidate index, or `None` to skip the scene.
pub fn selection_comparison<F>(
    sets: &[(&LabeledScene, &RolloutSet)],
    mut annotator: F,
    trc: &TrustRegionConfig,
) -> Result<SelectionReport, MetricsError>
where
    F: FnMut(&Scene, &RolloutSet) -> Option<usize>,
{
    trc.validate()?;
    let (mut n, mut skipped) = (0usize, 0usize);
    let (mut ml_rfs, mut sel_rfs, mut ml_ade, mut sel_ade) = (0.0, 0.0, 0.0, 0.0);
    for (ls, rs) in sets {
        let Some(sel) = annotator(&ls.scene, rs).filter(|&i| i < rs.len()) else {
            skipped += 1;
            continue;
        };
        let ml = most_likely(rs);
        let top = &ls.rater_label.top().trajectory;
        let (a, b) = (&rs.candidates[ml].trajectory, &rs.candidates[sel].trajectory);
        ml_rfs += rfs(a, &ls.rater_label, trc)?;
        sel_rfs += rfs(b, &ls.rater_label, trc)?;
        ml_ade += ade(a, top)?;
        sel_ade += ade(b, top)?;
        n += 1;
    }
    let d = n.max(1) as f64;
    let (ml_rfs, sel_rfs, ml_ade, sel_ade) = (ml_rfs / d, sel_rfs / d, ml_ade / d, sel_ade / d);
    Ok(SelectionReport {
        scenes: n,
        skipped,
        most_likely_rfs: ml_rfs,
        selected_rfs: sel_rfs,
        rfs_change_pct: pct(ml_rfs, sel_rfs),
        most_likely_ade: ml_ade,
        selected_ade: sel_ade,
        ade_change_pct: pct(ml_ade, sel_ade),
    })
}

impl SelectionReport {
    /// Plain-text table: most-likely row, selected row, signed change row.
    pub fn table(&self, selector: &str) -> String {
        let w = selector.len().max("Most likely".len()).max("Selection gain".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>10}  {:>10}", "Trajectory", "RFS", "ADE");
        let _ = writeln!(s, "{:<w$}  {:>10.4}  {:>10.4}", "Most likely", self.most_likely_rfs, self.most_likely_ade);
        let _ = writeln!(s, "{:<w$}  {:>10.4}  {:>10.4}", selector, self.selected_rfs, self.selected_ade);
        let _ = writeln!(
            s,
            "{:<w$}  {:>9}%  {:>9}%",
            "Selection gain",
            format!("{:+.2}", self.rfs_change_pct),
            format!("{:+.2}", self.ade_change_pct)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::Candidate;
    use crate::scene::RatedTrajectory;
    use crate::tokenizer::TokenSequence;
    use proptest::prelude::*;

    fn traj(f: impl Fn(f64) -> Point) -> Trajectory {
        Trajectory::new(0.5, (1..=10).map(|k| f(k as f64 * 0.5)).collect())
    }

    fn straight() -> Trajectory {
        traj(|t| Point::new(5.0 * t, 0.0))
    }

    fn label(scores: &[(Trajectory, f64)]) -> RaterLabel {
        RaterLabel {
            rated: scores
                .iter()
                .map(|(t, s)| RatedTrajectory {
                    trajectory: t.clone(),
                    score: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn ade_simple_cases() {
        let a = straight();
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b = traj(|t| Point::new(5.0 * t + 1.0, 0.0));
        assert!((ade(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ade_brute_force_sum() {
        let p = traj(|t| Point::new(t, 0.0));
        let q = traj(|t| Point::new(t, 0.1 * t));
        let mut sum = 0.0;
        for k in 1..=10 {
            sum += 0.1 * (k as f64 * 0.5);
        }
        assert!((ade(&p, &q).unwrap() - sum / 10.0).abs() < 1e-12);
    }

    #[test]
    fn ade_rejects_mismatched_lengths() {
        let a = straight();
        let b = Trajectory::new(0.5, a.points[..5].to_vec());
        assert!(matches!(ade(&a, &b), Err(MetricsError::Length { .. })));
    }

    #[test]
    fn rfs_exact_match_and_plateau() {
        let l = label(&[(straight(), 10.0), (traj(|t| Point::new(5.0 * t, 3.0)), 6.0)]);
        let trc = TrustRegionConfig::default();
        assert_eq!(rfs(&straight(), &l, &trc).unwrap(), 10.0);
        let near = traj(|t| Point::new(5.0 * t + 0.5, -0.6));
        assert_eq!(rfs(&near, &l, &trc).unwrap(), 10.0);
    }

    #[test]
    fn rfs_lateral_offset_two_thresholds() {
        let trc = TrustRegionConfig::default();
        let l = label(&[(straight(), 10.0)]);
        let off = traj(|t| Point::new(5.0 * t, 2.0 * trc.lat_base));
        // 3 s: excess (2 - 1) / 1 = 1; 5 s: (2 - 1.5) / 1.5 = 1/3; worst is 1
        let expected = 10.0 * trc.decay_rate.powf(1.0);
        assert!((rfs(&off, &l, &trc).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rfs_uses_the_rated_trajectory_frame() {
        // rated path heads along +y; an offset along +y is longitudinal there
        let up = traj(|t| Point::new(0.0, 5.0 * t));
        let l = label(&[(up.clone(), 10.0)]);
        let trc = TrustRegionConfig::default();
        let ahead = traj(|t| Point::new(0.0, 5.0 * t + 1.9));
        let beside = traj(|t| Point::new(1.9, 5.0 * t));
        assert_eq!(rfs(&ahead, &l, &trc).unwrap(), 10.0);
        assert!(rfs(&beside, &l, &trc).unwrap() < 10.0);
    }

    #[test]
    fn rfs_takes_best_rated_and_rejects_empty_label() {
        let trc = TrustRegionConfig::default();
        let alt = traj(|t| Point::new(5.0 * t, 3.0));
        let l = label(&[(straight(), 10.0), (alt.clone(), 6.0)]);
        assert_eq!(rfs(&alt, &l, &trc).unwrap(), 6.0);
        assert!(rfs(&alt, &label(&[]), &trc).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn ade_is_a_metric(
            a in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 10),
            b in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 10),
            c in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 10),
        ) {
            let t = |v: &Vec<(f64, f64)>| Trajectory::new(0.5, v.iter().map(|&(x, y)| Point::new(x, y)).collect());
            let (a, b, c) = (t(&a), t(&b), t(&c));
            let ab = ade(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ade(&b, &a).unwrap());
            prop_assert!(ab <= ade(&a, &c).unwrap() + ade(&c, &b).unwrap() + 1e-9);
        }

        #[test]
        fn rfs_bounded_and_monotone_under_translation(
            angle in 0.0f64..std::f64::consts::TAU,
            s1 in 0.0f64..20.0,
            ds in 0.0f64..20.0,
            score in 0.0f64..10.0,
        ) {
            let trc = TrustRegionConfig::default();
            let l = label(&[(straight(), score)]);
            let dir = Point::new(angle.cos(), angle.sin());
            let shift = |s: f64| traj(|t| Point::new(5.0 * t, 0.0) + dir * s);
            let r1 = rfs(&shift(s1), &l, &trc).unwrap();
            let r2 = rfs(&shift(s1 + ds), &l, &trc).unwrap();
            prop_assert!((0.0..=10.0).contains(&r1));
            prop_assert!(r2 <= r1);
        }
    }

    fn rs(trajs: &[Trajectory], probs: &[f64]) -> RolloutSet {
        RolloutSet {
            scene_id: "s".into(),
            model_id: "m".into(),
            seed: 0,
            candidates: trajs
                .iter()
                .zip(probs)
                .map(|(t, &p)| Candidate {
                    trajectory: t.clone(),
                    tokens: TokenSequence(vec![84; 10]),
                    mode_probability: p,
                    model_logprob: 0.0,
                })
                .collect(),
        }
    }

    fn fixture(id: &str, ego: Trajectory) -> LabeledScene {
        let mut ls = crate::scene::generate_corpus(3, 1, &Default::default()).unwrap().remove(0);
        ls.scene.scene_id = id.into();
        ls.rater_label = label(&[(ego, 10.0), (traj(|t| Point::new(5.0 * t, 4.0)), 5.0)]);
        ls
    }

    #[test]
    fn hand_built_scenes_match_manual_computation() {
        let trc = TrustRegionConfig::default();
        let gt = straight();
        let ls = fixture("a", gt.clone());
        let far = traj(|t| Point::new(5.0 * t, 2.0));
        // central mode is gt (two copies), most likely is `far`
        let set = rs(&[gt.clone(), gt.clone(), far.clone()], &[0.3, 0.3, 0.4]);
        let m = scene_metrics(&ls, &set, &trc).unwrap();
        let far_rfs = 1.0; // lateral excess 1 against gt; rated[1] gives 5 * 0.1^((4-2-1)/1) = 0.5
        assert_eq!(m.rfs, 10.0);
        assert!((m.ml_rfs - far_rfs).abs() < 1e-12);
        assert!((m.avg_rfs - (20.0 + far_rfs) / 3.0).abs() < 1e-12);
        assert_eq!(m.ade, 0.0);

        let r = EvalReport::from_scenes(&[
            m.clone(),
            SceneMetrics {
                scene_id: "b".into(),
                rfs: 4.0,
                avg_rfs: 3.0,
                ml_rfs: 2.0,
                ade: 1.0,
            },
        ]);
        assert_eq!(r.scenes, 2);
        assert!((r.rfs - 7.0).abs() < 1e-12);
        assert!((r.ade - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_is_order_invariant() {
        let s: Vec<SceneMetrics> = (0..7)
            .map(|i| SceneMetrics {
                scene_id: format!("s{i}"),
                rfs: 0.1 * i as f64 + 1.0 / 3.0,
                avg_rfs: 1.0 / (i as f64 + 1.0),
                ml_rfs: i as f64 * 0.7,
                ade: 0.3 * i as f64,
            })
            .collect();
        let mut r = s.clone();
        r.reverse();
        r.swap(1, 4);
        assert_eq!(EvalReport::from_scenes(&s), EvalReport::from_scenes(&r));
    }

    #[test]
    fn identity_annotator_gives_zero_change() {
        let ls = fixture("a", straight());
        let set = rs(
            &[straight(), traj(|t| Point::new(5.0 * t, 1.5))],
            &[0.2, 0.8],
        );
        let pairs = vec![(&ls, &set)];
        let r = selection_comparison(&pairs, |_, rs| Some(most_likely(rs)), &TrustRegionConfig::default()).unwrap();
        assert_eq!(r.rfs_change_pct, 0.0);
        assert_eq!(r.ade_change_pct, 0.0);
        let better = selection_comparison(&pairs, |_, _| Some(0), &TrustRegionConfig::default()).unwrap();
        assert!(better.ade_change_pct < 0.0 && better.rfs_change_pct > 0.0);
        let t = better.table("Oracle");
        assert!(t.contains("Most likely") && t.contains("Oracle") && t.contains('%'));
        let skip = selection_comparison(&pairs, |_, _| None, &TrustRegionConfig::default()).unwrap();
        assert_eq!((skip.scenes, skip.skipped), (0, 1));
    }
}
