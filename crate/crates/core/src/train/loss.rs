use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::annotate::{Hla, HlaFields};
use crate::nnet::{graph, Graph, ForecastModel, Var};
use crate::scene::Scene;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub il_weight: f64,
    pub dpo_weight: f64,
    pub hla_aux_weight: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            il_weight: 1.0,
            dpo_weight: 1.0,
            hla_aux_weight: 0.2,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(TrainError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, w) in [
            ("il_weight", self.il_weight),
            ("dpo_weight", self.dpo_weight),
            ("hla_aux_weight", self.hla_aux_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// `-log sigmoid(beta * (logpw - logpw_ref) - beta * (logpl - logpl_ref))`.
pub fn dpo_pair_loss(logpw: f64, logpw_ref: f64, logpl: f64, logpl_ref: f64, beta: f64) -> f64 {
    -graph::log_sigmoid(beta * (logpw - logpw_ref) - beta * (logpl - logpl_ref))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub scene_id: String,
    pub winner: TokenSequence,
    pub loser: TokenSequence,
}

/// One winner against every distinct loser. Losers identical to the winner
/// are dropped; if none remain the scene is degenerate.
pub fn build_pairs(
    scene_id: &str,
    winner: &TokenSequence,
    candidates: impl IntoIterator<Item = TokenSequence>,
) -> Result<Vec<PreferencePair>, TrainError> {
    let pairs: Vec<PreferencePair> = candidates
        .into_iter()
        .filter(|c| c != winner)
        .map(|loser| PreferencePair {
            scene_id: scene_id.to_string(),
            winner: winner.clone(),
            loser,
        })
        .collect();
    if pairs.is_empty() {
        return Err(TrainError::DegeneratePairs(scene_id.to_string()));
    }
    Ok(pairs)
}

/// A scene's preference pairs with reference-model log-probabilities
/// computed once up front; the reference is never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub winner: TokenSequence,
    pub losers: Vec<TokenSequence>,
    pub ref_winner: f64,
    pub ref_losers: Vec<f64>,
}

impl DpoExample {
    pub fn new(
        reference: &ForecastModel,
        scene: &Scene,
        hla: Option<&Hla>,
        pairs: &[PreferencePair],
    ) -> Result<Self, TrainError> {
        let winner = match pairs.first() {
            Some(p) => p.winner.clone(),
            None => return Err(TrainError::DegeneratePairs(scene.scene_id.clone())),
        };
        if pairs.iter().any(|p| p.winner != winner) {
            return Err(TrainError::Config("pairs of one scene must share the winner".into()));
        }
        let losers: Vec<TokenSequence> = pairs.iter().map(|p| p.loser.clone()).collect();
        let mut g = Graph::no_grad();
        let memory = reference.encode(&mut g, scene, hla);
        let mut seqs = vec![&winner];
        seqs.extend(losers.iter());
        let e = reference.sequence_logprobs(&mut g, memory, &seqs)?;
        let lp = g.value(e.logprobs).to_vec();
        Ok(Self {
            winner,
            losers,
            ref_winner: lp[0],
            ref_losers: lp[1..].to_vec(),
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.losers.len()
    }
}

/// Differentiable pieces of a DPO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DpoTerms {
    /// Mean pair loss, scalar.
    pub loss: Var,
    /// Mean of `log pi(w) - log pi(l)` under the target, not differentiated.
    pub margin: f64,
}

/// Mean pair loss of `target` over the example's pairs.
pub fn dpo_loss(
    g: &mut Graph,
    target: &ForecastModel,
    memory: Var,
    ex: &DpoExample,
    beta: f64,
) -> Result<DpoTerms, TrainError> {
    let mut seqs = vec![&ex.winner];
    seqs.extend(ex.losers.iter());
    let e = target.sequence_logprobs(g, memory, &seqs)?;
    let lp = g.value(e.logprobs).to_vec();
    let lw = g.index(e.logprobs, 0);
    let rw = g.scalar_const(ex.ref_winner);
    let dw = g.sub(lw, rw);
    let mut z = Vec::with_capacity(ex.n_pairs());
    for (i, &rl) in ex.ref_losers.iter().enumerate() {
        let ll = g.index(e.logprobs, i + 1);
        let rl = g.scalar_const(rl);
        let dl = g.sub(ll, rl);
        let d = g.sub(dw, dl);
        z.push(g.scale(d, beta));
    }
    let z = g.concat_rows(&z);
    let ls = g.log_sigmoid(z);
    let m = g.mean(ls);
    let loss = g.scale(m, -1.0);
    let margin = lp[1..].iter().map(|l| lp[0] - l).sum::<f64>() / ex.n_pairs() as f64;
    Ok(DpoTerms { loss, margin })
}

/// Mean per-token negative log-likelihood of `target`. Also returns the
/// decoder hidden states for the auxiliary heads.
pub fn il_loss(
    g: &mut Graph,
    model: &ForecastModel,
    memory: Var,
    target: &TokenSequence,
) -> Result<(Var, Var), TrainError> {
    let e = model.sequence_logprobs(g, memory, &[target])?;
    let lp = g.index(e.logprobs, 0);
    let loss = g.scale(lp, -1.0 / model.horizon() as f64);
    Ok((loss, e.hidden))
}

/// Sum of cross-entropies of the enabled auxiliary heads.
pub fn hla_aux_loss(g: &mut Graph, model: &ForecastModel, hidden: Var, label: &Hla, fields: HlaFields) -> Var {
    let h = model.hla_logits(g, hidden);
    let mut terms = Vec::new();
    if fields.maneuver {
        terms.push(g.pick_log_softmax(h.maneuver, &[label.maneuver.index()]));
    }
    if fields.direction {
        terms.push(g.pick_log_softmax(h.direction, &[label.direction.index()]));
    }
    if fields.speed {
        terms.push(g.pick_log_softmax(h.speed, &[label.speed.index()]));
    }
    if terms.is_empty() {
        return g.scalar_const(0.0);
    }
    let c = g.concat_rows(&terms);
    let s = g.sum(c);
    g.scale(s, -1.0)
}

/// Value of [`il_loss`] without gradient recording.
pub fn il_loss_value(
    model: &ForecastModel,
    scene: &Scene,
    hla: Option<&Hla>,
    target: &TokenSequence,
) -> Result<f64, TrainError> {
    let mut g = Graph::no_grad();
    let m = model.encode(&mut g, scene, hla);
    let (l, _) = il_loss(&mut g, model, m, target)?;
    Ok(g.scalar(l))
}
