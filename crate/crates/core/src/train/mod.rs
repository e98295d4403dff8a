//! Training objectives, optimizer and the epoch loop.

mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotation, Hla, HlaFields};
use crate::nnet::{ForecastModel, Gradients, Graph, NnError};
use crate::rollout::RolloutSet;
use crate::scene::{LabeledScene, Scene};
use crate::tokenizer::{tokenize, TokenSequence};

pub use loss::{
    build_pairs, dpo_loss, dpo_pair_loss, hla_aux_loss, il_loss, il_loss_value, DpoConfig, DpoExample, DpoTerms,
    PreferencePair,
};
pub use optim::{Adam, AdamConfig, StepStats};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("scene {0}: every loser duplicates the winner")]
    DegeneratePairs(String),
    #[error("non-finite gradient in {tensor}[{index}] = {value}")]
    NonFiniteGradient { tensor: String, index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Il,
    IlHlaLoss,
    IlHlaInput,
    DpoOnly,
    IlDpo,
    IlPrefDpo,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 6] = [
        FinetuneMode::Il,
        FinetuneMode::IlHlaLoss,
        FinetuneMode::IlHlaInput,
        FinetuneMode::DpoOnly,
        FinetuneMode::IlDpo,
        FinetuneMode::IlPrefDpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Il => "il",
            FinetuneMode::IlHlaLoss => "il_hla_loss",
            FinetuneMode::IlHlaInput => "il_hla_input",
            FinetuneMode::DpoOnly => "dpo_only",
            FinetuneMode::IlDpo => "il_dpo",
            FinetuneMode::IlPrefDpo => "il_pref_dpo",
        }
    }

    pub fn uses_il(self) -> bool {
        self != FinetuneMode::DpoOnly
    }

    /// Modes whose DPO winner comes from an annotator over model rollouts.
    pub fn uses_vl_dpo(self) -> bool {
        matches!(self, FinetuneMode::DpoOnly | FinetuneMode::IlDpo)
    }

    pub fn uses_dpo(self) -> bool {
        self.uses_vl_dpo() || self == FinetuneMode::IlPrefDpo
    }

    pub fn needs_annotations(self) -> bool {
        matches!(
            self,
            FinetuneMode::IlHlaLoss | FinetuneMode::IlHlaInput | FinetuneMode::DpoOnly | FinetuneMode::IlDpo
        )
    }

    /// Whether the model is conditioned on the annotated HLA, in training
    /// and at evaluation.
    pub fn hla_input(self) -> bool {
        self == FinetuneMode::IlHlaInput
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FinetuneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown finetune mode `{s}`")))
    }
}

/// Which trajectory imitation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlTarget {
    /// The logged demonstration, as in pretraining.
    Demonstration,
    /// The highest-rated rater trajectory.
    TopRated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub il_target: IlTarget,
    pub hla_aux_fields: HlaFields,
    pub dpo: DpoConfig,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Il,
            epochs: 4,
            batch_size: 16,
            seed: 0,
            il_target: IlTarget::TopRated,
            hla_aux_fields: HlaFields::ALL,
            dpo: DpoConfig::default(),
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.mode == FinetuneMode::IlHlaLoss && !self.hla_aux_fields.any() {
            return Err(TrainError::Config("il_hla_loss needs at least one auxiliary head".into()));
        }
        self.dpo.validate()?;
        self.optimizer.validate()
    }
}

/// Annotator output and the rollouts it judged, keyed by scene id.
#[derive(Debug, Clone, Copy, Default)]
pub struct PreferenceData<'a> {
    pub annotations: Option<&'a BTreeMap<String, Annotation>>,
    pub rollouts: Option<&'a BTreeMap<String, RolloutSet>>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: FinetuneMode,
    pub steps: u64,
    pub loss: f64,
    pub il_loss: Option<f64>,
    pub hla_loss: Option<f64>,
    pub dpo_loss: Option<f64>,
    /// Mean target-model `log pi(w) - log pi(l)` over DPO scenes.
    pub dpo_margin: Option<f64>,
    pub dpo_scenes: usize,
    pub dpo_pairs: usize,
    /// Scenes without a usable preference signal.
    pub dpo_skipped: usize,
    pub mean_grad_norm: f64,
}

struct Example {
    scene: Scene,
    target: TokenSequence,
    hla_input: Option<Hla>,
    hla_label: Option<Hla>,
    dpo: Option<DpoExample>,
}

#[derive(Default)]
struct Sums {
    n: usize,
    loss: f64,
    il: f64,
    hla: f64,
    dpo: f64,
    margin: f64,
    dpo_n: usize,
    grad_norm: f64,
    batches: usize,
}

/// Builds the DPO example for one scene from an annotation over rollouts.
pub fn vl_dpo_example(
    reference: &ForecastModel,
    scene: &Scene,
    hla: Option<&Hla>,
    annotation: &Annotation,
    rs: &RolloutSet,
) -> Result<DpoExample, TrainError> {
    let Some(w) = rs.candidates.get(annotation.selected_index) else {
        return Err(TrainError::Config(format!(
            "scene {}: selected index {} out of range for {} candidates",
            scene.scene_id,
            annotation.selected_index,
            rs.candidates.len()
        )));
    };
    let losers = rs
        .candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != annotation.selected_index)
        .map(|(_, c)| c.tokens.clone());
    let pairs = build_pairs(&scene.scene_id, &w.tokens, losers)?;
    DpoExample::new(reference, scene, hla, &pairs)
}

/// Pairs from rater labels: top-rated winner against each lower-rated one.
pub fn rater_dpo_example(
    reference: &ForecastModel,
    ls: &LabeledScene,
    hla: Option<&Hla>,
) -> Result<DpoExample, TrainError> {
    let vocab = reference.vocab();
    let rated = &ls.rater_label.rated;
    let winner = tokenize(&rated[0].trajectory, vocab);
    let losers = rated[1..].iter().map(|r| tokenize(&r.trajectory, vocab));
    let pairs = build_pairs(&ls.scene.scene_id, &winner, losers)?;
    DpoExample::new(reference, &ls.scene, hla, &pairs)
}

/// VL-DPO loss of `target` against a frozen `reference` for one scene.
pub fn vl_dpo_loss(
    reference: &ForecastModel,
    target: &ForecastModel,
    scene: &Scene,
    annotation: &Annotation,
    rs: &RolloutSet,
    cfg: &DpoConfig,
) -> Result<f64, TrainError> {
    let ex = vl_dpo_example(reference, scene, None, annotation, rs)?;
    let mut g = Graph::no_grad();
    let m = target.encode(&mut g, scene, None);
    let t = dpo_loss(&mut g, target, m, &ex, cfg.beta)?;
    Ok(g.scalar(t.loss))
}

/// Staged finetuning from an initial model. The initial model doubles as
/// the frozen DPO reference.
pub struct Trainer {
    config: TrainConfig,
    model: ForecastModel,
    reference: ForecastModel,
    examples: Vec<Example>,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    dpo_skipped: usize,
}

impl Trainer {
    pub fn new(
        init: ForecastModel,
        data: &[LabeledScene],
        prefs: PreferenceData<'_>,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mode = config.mode;
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if mode.needs_annotations() && prefs.annotations.is_none() {
            return Err(TrainError::Config(format!("mode {mode} needs an annotation store")));
        }
        if mode.uses_vl_dpo() && prefs.rollouts.is_none() {
            return Err(TrainError::Config(format!("mode {mode} needs the annotated rollouts")));
        }
        let want_dpo = mode.uses_dpo() && config.dpo.dpo_weight > 0.0;
        let reference = init.clone();
        let mut examples = Vec::with_capacity(data.len());
        let mut dpo_skipped = 0;
        for ls in data {
            let scene = &ls.scene;
            let annotation = prefs.annotations.and_then(|a| a.get(&scene.scene_id));
            let target = match config.il_target {
                IlTarget::Demonstration => tokenize(&scene.ego_future, init.vocab()),
                IlTarget::TopRated => tokenize(&ls.rater_label.top().trajectory, init.vocab()),
            };
            let hla_input = if mode.hla_input() { annotation.map(|a| a.hla) } else { None };
            let hla_label = if mode == FinetuneMode::IlHlaLoss { annotation.map(|a| a.hla) } else { None };
            let dpo = if !want_dpo {
                None
            } else if mode == FinetuneMode::IlPrefDpo {
                Some(rater_dpo_example(&reference, ls, hla_input.as_ref())?)
            } else {
                let rs = prefs.rollouts.and_then(|r| r.get(&scene.scene_id));
                match (annotation, rs) {
                    (Some(a), Some(rs)) => match vl_dpo_example(&reference, scene, hla_input.as_ref(), a, rs) {
                        Ok(ex) => Some(ex),
                        Err(TrainError::DegeneratePairs(_)) => None,
                        Err(e) => return Err(e),
                    },
                    _ => None,
                }
            };
            if want_dpo && dpo.is_none() {
                dpo_skipped += 1;
            }
            examples.push(Example {
                scene: scene.clone(),
                target,
                hla_input,
                hla_label,
                dpo,
            });
        }
        let adam = Adam::new(config.optimizer, &init.params);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model: init,
            reference,
            examples,
            adam,
            epoch: 0,
            dpo_skipped,
        })
    }

    pub fn model(&self) -> &ForecastModel {
        &self.model
    }

    pub fn into_model(self) -> ForecastModel {
        self.model
    }

    pub fn reference(&self) -> &ForecastModel {
        &self.reference
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss of one example into `grads`; returns the scalar components.
    fn accumulate(&self, ex: &Example, grads: &mut Gradients, sums: &mut Sums) -> Result<(), TrainError> {
        let cfg = &self.config;
        let mode = cfg.mode;
        let w = cfg.dpo;
        let mut g = Graph::new();
        let memory = self.model.encode(&mut g, &ex.scene, ex.hla_input.as_ref());
        let mut terms = Vec::new();
        if mode.uses_il() && w.il_weight > 0.0 {
            let (il, hidden) = il_loss(&mut g, &self.model, memory, &ex.target)?;
            sums.il += g.scalar(il);
            terms.push(g.scale(il, w.il_weight));
            if let (Some(label), true) = (&ex.hla_label, w.hla_aux_weight > 0.0) {
                let h = hla_aux_loss(&mut g, &self.model, hidden, label, cfg.hla_aux_fields);
                sums.hla += g.scalar(h);
                terms.push(g.scale(h, w.hla_aux_weight));
            }
        }
        if let Some(d) = &ex.dpo {
            let t = dpo_loss(&mut g, &self.model, memory, d, w.beta)?;
            sums.dpo += g.scalar(t.loss);
            sums.margin += t.margin;
            sums.dpo_n += 1;
            terms.push(g.scale(t.loss, w.dpo_weight));
        }
        sums.n += 1;
        if terms.is_empty() {
            return Ok(());
        }
        let total = if terms.len() == 1 {
            terms[0]
        } else {
            let c = g.concat_rows(&terms);
            g.sum(c)
        };
        sums.loss += g.scalar(total);
        g.backward(total, grads)?;
        Ok(())
    }

    /// One pass over the training set in a seeded shuffled order.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = Sums::default();
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = Gradients::zeros_like(&self.model.params);
            for &i in batch {
                self.accumulate(&self.examples[i], &mut grads, &mut sums)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            let s = self.adam.step(&mut self.model.params, &grads)?;
            sums.grad_norm += s.grad_norm;
            sums.batches += 1;
        }
        self.epoch += 1;
        let mode = self.config.mode;
        let n = sums.n.max(1) as f64;
        let il_on = mode.uses_il() && self.config.dpo.il_weight > 0.0;
        let hla_n = self.examples.iter().filter(|e| e.hla_label.is_some()).count();
        let dpo_pairs = self.examples.iter().filter_map(|e| e.dpo.as_ref()).map(|d| d.n_pairs()).sum();
        let dn = sums.dpo_n.max(1) as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            mode,
            steps: self.adam.steps(),
            loss: sums.loss / n,
            il_loss: il_on.then_some(sums.il / n),
            hla_loss: (il_on && hla_n > 0 && self.config.dpo.hla_aux_weight > 0.0).then(|| sums.hla / hla_n as f64),
            dpo_loss: (sums.dpo_n > 0).then_some(sums.dpo / dn),
            dpo_margin: (sums.dpo_n > 0).then_some(sums.margin / dn),
            dpo_scenes: sums.dpo_n,
            dpo_pairs,
            dpo_skipped: self.dpo_skipped,
            mean_grad_norm: sums.grad_norm / sums.batches.max(1) as f64,
        })
    }

    /// Runs the configured number of epochs.
    pub fn run(&mut self) -> Result<Vec<EpochRecord>, TrainError> {
        (0..self.config.epochs).map(|_| self.run_epoch()).collect()
    }
}

/// Trains from `init` for the configured epochs and returns the model and
/// its log.
pub fn finetune(
    init: ForecastModel,
    data: &[LabeledScene],
    prefs: PreferenceData<'_>,
    config: TrainConfig,
) -> Result<(ForecastModel, Vec<EpochRecord>), TrainError> {
    let mut t = Trainer::new(init, data, prefs, config)?;
    let log = t.run()?;
    Ok((t.into_model(), log))
}

#[cfg(test)]
mod tests;
