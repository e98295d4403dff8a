//! Ancestral sampling of ego trajectories and their reduction to a fixed set
//! of modes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::Hla;
use crate::geometry::mean_distance;
use crate::nnet::{DecoderCache, ForecastModel, NnError};
use crate::scene::{Point, Scene, Trajectory};
use crate::tokenizer::{detokenize, TokenSequence};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("rollout file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub n_raw: usize,
    pub temperature: f64,
    pub n_modes: usize,
    pub kmeans_iters: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_raw: 64,
            temperature: 1.0,
            n_modes: 12,
            kmeans_iters: 20,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.n_modes == 0 || self.n_raw < self.n_modes {
            return Err(RolloutError::Config(format!(
                "n_raw ({}) must be at least n_modes ({}) and n_modes positive",
                self.n_raw, self.n_modes
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(RolloutError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// One sampled sequence with its log-probability under the model at
/// temperature 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRollout {
    pub tokens: TokenSequence,
    pub trajectory: Trajectory,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub tokens: TokenSequence,
    pub mode_probability: f64,
    pub model_logprob: f64,
}

/// Aggregated prediction set for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSet {
    pub scene_id: String,
    pub model_id: String,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
}

impl RolloutSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Derives a per-scene seed so results do not depend on dataset order.
pub fn scene_seed(base: u64, scene_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(scene_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Short content hash of a model's parameters.
pub fn model_fingerprint(model: &ForecastModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        h.update(name.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn sample_index<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // rounding left u just above the last weight; take the last positive one
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[i] - lse
}

/// Draws `n_raw` independent sequences. Sample `i` uses its own ChaCha
/// stream, so any subset of samples is reproducible on its own.
pub fn sample_rollouts(
    model: &ForecastModel,
    scene: &Scene,
    hla: Option<&Hla>,
    n_raw: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<RawRollout>, RolloutError> {
    if n_raw == 0 {
        return Err(RolloutError::Config("n_raw must be positive".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(RolloutError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let memory = model.encode_scene(scene, hla);
    let mut cache = DecoderCache::new(model, &memory, n_raw);
    let mut rngs: Vec<ChaCha8Rng> = (0..n_raw)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let c = model.vocab().motion_tokens();
    let mut inputs = vec![model.vocab().bos(); n_raw];
    let mut tokens = vec![Vec::with_capacity(model.horizon()); n_raw];
    let mut logprobs = vec![0.0; n_raw];
    for _ in 0..model.horizon() {
        let logits = cache.step(&inputs);
        for s in 0..n_raw {
            let row = &logits[s * c..(s + 1) * c];
            let t = sample_index(row, temperature, &mut rngs[s]);
            logprobs[s] += log_softmax_at(row, t);
            tokens[s].push(t as u32);
            inputs[s] = t as u32;
        }
    }
    let dt = scene.ego_future.dt;
    tokens
        .into_iter()
        .zip(logprobs)
        .map(|(t, logprob)| {
            let tokens = TokenSequence(t);
            let trajectory = detokenize(&tokens, model.vocab(), dt).map_err(NnError::from)?;
            Ok(RawRollout {
                tokens,
                trajectory,
                logprob,
            })
        })
        .collect()
}

fn nearest(p: Point, centers: &[Point]) -> usize {
    let mut best = 0;
    for (k, c) in centers.iter().enumerate() {
        if p.dist(*c) < p.dist(centers[best]) {
            best = k;
        }
    }
    best
}

fn cluster_sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut n = vec![0; k];
    for &l in labels {
        n[l] += 1;
    }
    n
}

/// Index of the largest cluster; ties go to the lower index.
fn largest(sizes: &[usize]) -> usize {
    let mut best = 0;
    for (k, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = k;
        }
    }
    best
}

/// Endpoint k-means with farthest-point initialization.
///
/// Returns a cluster label per sample. Clusters that empty out during the
/// iterations are refilled with the member of the largest cluster farthest
/// from its center, as long as that member is distinct from the center.
fn kmeans(ends: &[Point], k: usize, iters: usize) -> Vec<usize> {
    let mut centers = vec![ends[0]];
    while centers.len() < k {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in ends.iter().enumerate() {
            let d = centers.iter().map(|c| p.dist(*c)).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        centers.push(ends[best]);
    }
    let mut labels = vec![0; ends.len()];
    for _ in 0..iters {
        for (l, p) in labels.iter_mut().zip(ends) {
            *l = nearest(*p, &centers);
        }
        for e in 0..k {
            let sizes = cluster_sizes(&labels, k);
            if sizes[e] > 0 {
                continue;
            }
            let big = largest(&sizes);
            let far = (0..ends.len())
                .filter(|&i| labels[i] == big)
                .fold(None::<(usize, f64)>, |acc, i| {
                    let d = ends[i].dist(centers[big]);
                    match acc {
                        Some((_, bd)) if bd >= d => acc,
                        _ => Some((i, d)),
                    }
                });
            if let Some((i, d)) = far {
                if d > 0.0 {
                    labels[i] = e;
                    centers[e] = ends[i];
                }
            }
        }
        let mut sum = vec![Point::ORIGIN; k];
        let sizes = cluster_sizes(&labels, k);
        for (l, p) in labels.iter().zip(ends) {
            sum[*l] = sum[*l] + *p;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centers[c] = sum[c] * (1.0 / sizes[c] as f64);
            }
        }
    }
    labels
}

/// Reduces raw samples to `n_modes` candidates: endpoint k-means, ADE medoid
/// per cluster, probability = cluster share. If fewer distinct clusters
/// survive, the largest cluster's representative is duplicated and its
/// probability split evenly among the copies.
pub fn aggregate(raw: &[RawRollout], n_modes: usize, iters: usize) -> Result<Vec<Candidate>, RolloutError> {
    if n_modes == 0 || raw.len() < n_modes {
        return Err(RolloutError::Config(format!(
            "need at least {n_modes} raw samples, got {}",
            raw.len()
        )));
    }
    let ends: Vec<Point> = raw.iter().map(|r| r.trajectory.last()).collect();
    let labels = kmeans(&ends, n_modes, iters);
    let n = raw.len() as f64;
    let mut out: Vec<Option<Candidate>> = (0..n_modes)
        .map(|k| {
            let members: Vec<usize> = (0..raw.len()).filter(|&i| labels[i] == k).collect();
            let medoid = *members.iter().min_by(|&&a, &&b| {
                let cost = |i: usize| {
                    members
                        .iter()
                        .map(|&j| mean_distance(&raw[i].trajectory.points, &raw[j].trajectory.points))
                        .sum::<f64>()
                };
                cost(a).total_cmp(&cost(b)).then(a.cmp(&b))
            })?;
            let r = &raw[medoid];
            Some(Candidate {
                trajectory: r.trajectory.clone(),
                tokens: r.tokens.clone(),
                mode_probability: members.len() as f64 / n,
                model_logprob: r.logprob,
            })
        })
        .collect();
    let empty: Vec<usize> = (0..n_modes).filter(|&k| out[k].is_none()).collect();
    if !empty.is_empty() {
        let sizes = cluster_sizes(&labels, n_modes);
        let big = largest(&sizes);
        let mut rep = out[big].clone().expect("largest cluster is populated");
        rep.mode_probability /= (empty.len() + 1) as f64;
        out[big] = Some(rep.clone());
        for k in empty {
            out[k] = Some(rep.clone());
        }
    }
    Ok(out.into_iter().map(|c| c.expect("filled")).collect())
}

/// Samples and aggregates one scene. The sampling seed is derived from
/// `base_seed` and the scene id.
pub fn rollout_scene(
    model: &ForecastModel,
    model_id: &str,
    scene: &Scene,
    hla: Option<&Hla>,
    cfg: &RolloutConfig,
    base_seed: u64,
) -> Result<RolloutSet, RolloutError> {
    cfg.validate()?;
    let seed = scene_seed(base_seed, &scene.scene_id);
    let raw = sample_rollouts(model, scene, hla, cfg.n_raw, cfg.temperature, seed)?;
    Ok(RolloutSet {
        scene_id: scene.scene_id.clone(),
        model_id: model_id.to_string(),
        seed,
        candidates: aggregate(&raw, cfg.n_modes, cfg.kmeans_iters)?,
    })
}

/// Highest mode probability; ties go to the higher model log-probability,
/// then the lower index.
pub fn most_likely(rs: &RolloutSet) -> usize {
    let mut best = 0;
    for (i, c) in rs.candidates.iter().enumerate().skip(1) {
        let b = &rs.candidates[best];
        if c.mode_probability > b.mode_probability
            || (c.mode_probability == b.mode_probability && c.model_logprob > b.model_logprob)
        {
            best = i;
        }
    }
    best
}

/// Candidate minimizing summed ADE to all others; ties go to the lower index.
pub fn central_mode(rs: &RolloutSet) -> usize {
    let cost = |i: usize| {
        rs.candidates
            .iter()
            .map(|c| mean_distance(&rs.candidates[i].trajectory.points, &c.trajectory.points))
            .sum::<f64>()
    };
    let mut best = 0;
    let mut best_cost = cost(0);
    for i in 1..rs.candidates.len() {
        let c = cost(i);
        if c < best_cost {
            best = i;
            best_cost = c;
        }
    }
    best
}

pub fn write_rollouts<W: Write>(sets: &[RolloutSet], mut w: W) -> Result<(), RolloutError> {
    for s in sets {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_rollouts(sets: &[RolloutSet], path: impl AsRef<Path>) -> Result<(), RolloutError> {
    let mut buf = Vec::new();
    write_rollouts(sets, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_rollouts(path: impl AsRef<Path>) -> Result<Vec<RolloutSet>, RolloutError> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: RolloutSet = serde_json::from_str(&line).map_err(|e| RolloutError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(set);
    }
    Ok(out)
}
