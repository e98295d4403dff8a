//! The stages of a run, composed from the library modules. Each stage reads
//! and writes plain values so the CLI can persist them between commands.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotate::{annotations_by_scene, oracle_annotate, Annotation, AnnotationRecord, Hla};
use crate::config::RunConfig;
use crate::metrics::{evaluate_model, selection_comparison, EvalReport, MetricsError, SelectionReport};
use crate::nnet::{ForecastModel, NnError};
use crate::rollout::{model_fingerprint, rollout_scene, RolloutError, RolloutSet};
use crate::scene::{generate_corpus, GeneratorConfig, LabeledScene, SceneError};
use crate::train::{EpochRecord, FinetuneMode, PreferenceData, TrainConfig, TrainError, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Usage(String),
}

/// Seed offsets separating the three generated splits.
pub const PRETRAIN_SPLIT: u64 = 0;
pub const TRAIN_SPLIT: u64 = 1;
pub const VAL_SPLIT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Val,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "pretrain" => Some(Split::Pretrain),
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Generates one split. Pretraining demonstrations carry behavior noise;
/// the finetuning and validation splits do not.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<LabeledScene>, PipelineError> {
    let d = &cfg.data;
    let (offset, n, noise) = match split {
        Split::Pretrain => (PRETRAIN_SPLIT, d.pretrain_scenes, d.pretrain_behavior_noise),
        Split::Train => (TRAIN_SPLIT, d.train_scenes, 0.0),
        Split::Val => (VAL_SPLIT, d.val_scenes, 0.0),
    };
    let gen = GeneratorConfig {
        behavior_noise: noise,
        ..d.generator.clone()
    };
    // split seeds are spaced so ids like `s<seed>-...` never collide
    let seed = d.seed.wrapping_mul(16).wrapping_add(offset);
    Ok(generate_corpus(seed, n, &gen)?)
}

fn train(
    init: ForecastModel,
    data: &[LabeledScene],
    prefs: PreferenceData<'_>,
    tc: TrainConfig,
    mut on_epoch: impl FnMut(&ForecastModel, &EpochRecord) -> Result<(), PipelineError>,
) -> Result<(ForecastModel, Vec<EpochRecord>), PipelineError> {
    let mut t = Trainer::new(init, data, prefs, tc)?;
    let mut log = Vec::new();
    for _ in 0..t.config().epochs {
        let r = t.run_epoch()?;
        on_epoch(t.model(), &r)?;
        log.push(r);
    }
    Ok((t.into_model(), log))
}

/// Imitation pretraining from a fresh initialization.
pub fn pretrain(
    cfg: &RunConfig,
    data: &[LabeledScene],
    on_epoch: impl FnMut(&ForecastModel, &EpochRecord) -> Result<(), PipelineError>,
) -> Result<(ForecastModel, Vec<EpochRecord>), PipelineError> {
    let init = ForecastModel::new(cfg.model.clone(), cfg.seed)?;
    let tc = TrainConfig {
        mode: FinetuneMode::Il,
        ..cfg.pretrain.clone()
    };
    train(init, data, PreferenceData::default(), tc, on_epoch)
}

/// Rollouts for every scene, optionally HLA-conditioned.
pub fn rollout_all(
    cfg: &RunConfig,
    model: &ForecastModel,
    data: &[LabeledScene],
    hla: Option<&BTreeMap<String, Hla>>,
) -> Result<Vec<RolloutSet>, PipelineError> {
    let id = model_fingerprint(model);
    data.iter()
        .map(|ls| {
            let h = hla.and_then(|m| m.get(&ls.scene.scene_id));
            Ok(rollout_scene(model, &id, &ls.scene, h, &cfg.rollout, cfg.seed)?)
        })
        .collect()
}

fn pair<'a>(
    data: &'a [LabeledScene],
    sets: &'a [RolloutSet],
) -> Result<Vec<(&'a LabeledScene, &'a RolloutSet)>, PipelineError> {
    let by_id: BTreeMap<&str, &RolloutSet> = sets.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    data.iter()
        .map(|ls| {
            by_id
                .get(ls.scene.scene_id.as_str())
                .map(|rs| (ls, *rs))
                .ok_or_else(|| PipelineError::Usage(format!("no rollouts for scene {}", ls.scene.scene_id)))
        })
        .collect()
}

/// Scripted-oracle annotations for every scene that has rollouts.
pub fn oracle_annotate_all(
    cfg: &RunConfig,
    data: &[LabeledScene],
    sets: &[RolloutSet],
) -> Result<Vec<AnnotationRecord>, PipelineError> {
    Ok(pair(data, sets)?
        .into_iter()
        .map(|(ls, rs)| AnnotationRecord::Annotated(oracle_annotate(&ls.scene, rs, &cfg.oracle)))
        .collect())
}

pub fn hla_map(annotations: &BTreeMap<String, Annotation>) -> BTreeMap<String, Hla> {
    annotations.iter().map(|(k, a)| (k.clone(), a.hla)).collect()
}

/// Validation metrics of one model.
pub fn evaluate(
    cfg: &RunConfig,
    model: &ForecastModel,
    data: &[LabeledScene],
    hla: Option<&BTreeMap<String, Hla>>,
) -> Result<EvalReport, PipelineError> {
    let id = model_fingerprint(model);
    Ok(evaluate_model(model, &id, data, hla, &cfg.rollout, cfg.seed, &cfg.trust_region)?.0)
}

/// One line of a finetuning metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub train: EpochRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Inputs a finetuning run may draw on beyond the training scenes.
#[derive(Debug, Clone, Copy, Default)]
pub struct FinetuneInputs<'a> {
    pub annotations: Option<&'a BTreeMap<String, Annotation>>,
    pub rollouts: Option<&'a [RolloutSet]>,
    /// Validation scenes evaluated after each epoch.
    pub val: Option<&'a [LabeledScene]>,
    /// HLA inputs for validation, used by HLA-conditioned modes.
    pub val_hla: Option<&'a BTreeMap<String, Hla>>,
}

pub fn finetune(
    cfg: &RunConfig,
    init: ForecastModel,
    data: &[LabeledScene],
    tc: TrainConfig,
    inputs: FinetuneInputs<'_>,
) -> Result<(ForecastModel, Vec<MetricsRecord>), PipelineError> {
    let rollouts: Option<BTreeMap<String, RolloutSet>> = inputs
        .rollouts
        .map(|r| r.iter().map(|s| (s.scene_id.clone(), s.clone())).collect());
    let prefs = PreferenceData {
        annotations: inputs.annotations,
        rollouts: rollouts.as_ref(),
    };
    let hla = if tc.mode.hla_input() { inputs.val_hla } else { None };
    let mut log = Vec::new();
    let (model, _) = train(init, data, prefs, tc, |m, r| {
        let eval = match inputs.val {
            Some(v) => Some(evaluate(cfg, m, v, hla)?),
            None => None,
        };
        log.push(MetricsRecord { train: r.clone(), eval });
        Ok(())
    })?;
    Ok((model, log))
}

/// Most-likely versus oracle-selected candidates.
pub fn compare_selection(
    cfg: &RunConfig,
    data: &[LabeledScene],
    sets: &[RolloutSet],
    annotations: Option<&BTreeMap<String, Annotation>>,
) -> Result<SelectionReport, PipelineError> {
    let pairs = pair(data, sets)?;
    let report = match annotations {
        Some(a) => selection_comparison(
            &pairs,
            |s, _| a.get(&s.scene_id).map(|x| x.selected_index),
            &cfg.trust_region,
        )?,
        None => selection_comparison(
            &pairs,
            |s, rs| Some(oracle_annotate(s, rs, &cfg.oracle).selected_index),
            &cfg.trust_region,
        )?,
    };
    Ok(report)
}

/// Everything the comparison experiments produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub selection: SelectionReport,
    /// `(method, validation metrics)` rows, pretrained first.
    pub rows: Vec<(String, EvalReport)>,
    pub logs: BTreeMap<String, Vec<MetricsRecord>>,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Runs the whole chain in memory: generate, pretrain, roll out and
/// annotate both splits, finetune each requested mode from the pretrained
/// model, evaluate on the validation split.
pub fn run_experiment(cfg: &RunConfig, modes: &[FinetuneMode]) -> Result<ExperimentReport, PipelineError> {
    let pre_data = generate_split(cfg, Split::Pretrain)?;
    let train_data = generate_split(cfg, Split::Train)?;
    let val = generate_split(cfg, Split::Val)?;
    let (pretrained, pre_log) = pretrain(cfg, &pre_data, |_, _| Ok(()))?;

    let train_sets = rollout_all(cfg, &pretrained, &train_data, None)?;
    let train_ann = annotations_by_scene(&oracle_annotate_all(cfg, &train_data, &train_sets)?);
    let val_sets = rollout_all(cfg, &pretrained, &val, None)?;
    let val_ann = annotations_by_scene(&oracle_annotate_all(cfg, &val, &val_sets)?);
    let val_hla = hla_map(&val_ann);

    let selection = compare_selection(cfg, &val, &val_sets, Some(&val_ann))?;
    let mut rows = vec![("pretrained".to_string(), evaluate(cfg, &pretrained, &val, None)?)];
    let mut logs = BTreeMap::new();
    logs.insert(
        "pretrain".to_string(),
        pre_log
            .into_iter()
            .map(|train| MetricsRecord { train, eval: None })
            .collect(),
    );
    for &mode in modes {
        let tc = TrainConfig {
            mode,
            ..cfg.finetune.clone()
        };
        let inputs = FinetuneInputs {
            annotations: Some(&train_ann),
            rollouts: Some(&train_sets),
            val: None,
            val_hla: None,
        };
        let (m, log) = finetune(cfg, pretrained.clone(), &train_data, tc, inputs)?;
        let hla = mode.hla_input().then_some(&val_hla);
        rows.push((mode.to_string(), evaluate(cfg, &m, &val, hla)?));
        logs.insert(mode.to_string(), log);
    }
    Ok(ExperimentReport { selection, rows, logs })
}
