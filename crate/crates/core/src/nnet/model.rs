use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{scene_features, FeatureConfig, SceneFeatures};
use super::graph::{AttnMask, Graph, ParamStore, Var};
use super::tensor::Tensor;
use super::NnError;
use crate::annotate::{Hla, HlaFields};
use crate::scene::Scene;
use crate::tokenizer::{MotionVocab, TokenError, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of the feed-forward blocks as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub init_std: f64,
    pub horizon_steps: usize,
    pub vocab: MotionVocab,
    pub features: FeatureConfig,
    /// Fields included when an HLA is fed to the encoder.
    pub hla_input_fields: HlaFields,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            init_std: 0.02,
            horizon_steps: 10,
            vocab: MotionVocab::default(),
            features: FeatureConfig::default(),
            hla_input_fields: HlaFields::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        self.vocab.validate()?;
        let bad = |m: String| Err(NnError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.horizon_steps == 0 || self.ffn_mult == 0 {
            return bad("horizon_steps and ffn_mult must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.features.lane_points < 2 || self.features.history_steps == 0 {
            return bad("features need at least 2 lane points and 1 history step".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(super) struct AttnParams {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    attn: AttnParams,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    self_attn: AttnParams,
    ln2: Norm,
    cross: AttnParams,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    lane: Linear,
    agent: Linear,
    light: Linear,
    ego: Linear,
    route: Linear,
    speed: Linear,
    hla: Linear,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    tok_emb: usize,
    pos_emb: usize,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out: Linear,
    aux_hidden: Linear,
    aux_maneuver: Linear,
    aux_direction: Linear,
    aux_speed: Linear,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.store.add(format!("{name}.w"), Tensor::randn(&[i, o], self.std, self.rng)),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, o])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Tensor::filled(&[1, d], 1.0)),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, d])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        AttnParams {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

/// Logits of the three auxiliary HLA classifiers, each `1 x vocab`.
#[derive(Debug, Clone, Copy)]
pub struct HlaLogits {
    pub maneuver: Var,
    pub direction: Var,
    pub speed: Var,
}

/// Output of a teacher-forced decoder pass over a batch of sequences that
/// share one scene.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Per-sequence log-probabilities, `n x 1`.
    pub logprobs: Var,
    /// Final decoder hidden states, `(n * horizon) x d_model`.
    pub hidden: Var,
}

/// Pre-norm encoder-decoder transformer over motion tokens.
///
/// The encoder sees one token per scene entity and carries no positional
/// information, so it is invariant to the order of agents and lanes. The
/// decoder has learned positional embeddings and predicts the next motion
/// token; its output layer covers motion tokens only, since the
/// begin-of-sequence marker is never a target.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: IdsEq,
}

// `Ids` is derived from the config, so equality is decided by config and params.
#[derive(Debug, Clone)]
struct IdsEq(Ids);

impl PartialEq for IdsEq {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl ForecastModel {
    /// Builds a freshly initialized model; the same `(config, seed)` always
    /// yields identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = &config.features;
        let hidden = d * config.ffn_mult;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            std: config.init_std,
        };
        let lane = b.linear("enc.in.lane", f.lane_dim(), d);
        let agent = b.linear("enc.in.agent", f.agent_dim(), d);
        let light = b.linear("enc.in.light", FeatureConfig::LIGHT_DIM, d);
        let ego = b.linear("enc.in.ego", f.ego_dim(), d);
        let route = b.linear("enc.in.route", FeatureConfig::ROUTE_DIM, d);
        let speed = b.linear("enc.in.speed", FeatureConfig::SPEED_DIM, d);
        let hla = b.linear("enc.in.hla", FeatureConfig::HLA_DIM, d);
        let enc = (0..config.encoder_layers)
            .map(|i| EncLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ff1: b.linear(&format!("enc.{i}.ff1"), d, hidden),
                ff2: b.linear(&format!("enc.{i}.ff2"), hidden, d),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let tok_emb = b.store.add(
            "dec.tok_emb",
            Tensor::randn(&[config.vocab.vocab_size(), d], config.init_std, b.rng),
        );
        let pos_emb = b.store.add(
            "dec.pos_emb",
            Tensor::randn(&[config.horizon_steps + 1, d], config.init_std, b.rng),
        );
        let dec = (0..config.decoder_layers)
            .map(|i| DecLayer {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), d),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                ff1: b.linear(&format!("dec.{i}.ff1"), d, hidden),
                ff2: b.linear(&format!("dec.{i}.ff2"), hidden, d),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out = b.linear("dec.out", d, config.vocab.motion_tokens());
        let aux_hidden = b.linear("aux.hidden", d, d);
        let aux_maneuver = b.linear("aux.maneuver", d, 11);
        let aux_direction = b.linear("aux.direction", d, 6);
        let aux_speed = b.linear("aux.speed", d, 4);
        let ids = Ids {
            lane,
            agent,
            light,
            ego,
            route,
            speed,
            hla,
            enc,
            enc_ln,
            tok_emb,
            pos_emb,
            dec,
            dec_ln,
            out,
            aux_hidden,
            aux_maneuver,
            aux_direction,
            aux_speed,
        };
        Ok(Self {
            params: b.store,
            config,
            ids: IdsEq(ids),
        })
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon_steps
    }

    pub fn vocab(&self) -> &MotionVocab {
        &self.config.vocab
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter ids that belong to the scene encoder.
    pub fn encoder_param_ids(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params.name(i).starts_with("enc.")).collect()
    }

    pub fn features(&self, scene: &Scene, hla: Option<&Hla>) -> SceneFeatures {
        scene_features(
            scene,
            &self.config.features,
            hla.map(|h| (h, self.config.hla_input_fields)),
        )
    }

    fn lin(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gain = g.param(&self.params, n.g);
        let bias = g.param(&self.params, n.b);
        g.layer_norm(x, gain, bias)
    }

    fn mha(&self, g: &mut Graph, xq: Var, xkv: Var, a: &AttnParams, mask: AttnMask) -> Var {
        let q = self.lin(g, xq, a.q);
        let k = self.lin(g, xkv, a.k);
        let v = self.lin(g, xkv, a.v);
        let o = g.attention(q, k, v, self.config.heads, mask);
        self.lin(g, o, a.o)
    }

    fn ffn(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.lin(g, x, ff1);
        let h = g.gelu(h);
        self.lin(g, h, ff2)
    }

    /// Encoder memory for precomputed features, `tokens x d_model`.
    pub fn encode_features(&self, g: &mut Graph, f: &SceneFeatures) -> Var {
        let ids = &self.ids.0;
        let mut groups = vec![
            (&f.lanes, ids.lane),
            (&f.agents, ids.agent),
            (&f.lights, ids.light),
            (&f.ego, ids.ego),
            (&f.route, ids.route),
            (&f.speed, ids.speed),
        ];
        if let Some(h) = &f.hla {
            groups.push((h, ids.hla));
        }
        let mut parts = Vec::new();
        for (t, l) in groups {
            if t.shape[0] == 0 {
                continue;
            }
            let x = g.constant(t.shape[0], t.cols(), t.data.clone());
            parts.push(self.lin(g, x, l));
        }
        let mut x = g.concat_rows(&parts);
        for layer in &ids.enc {
            let h = self.norm(g, x, layer.ln1);
            let a = self.mha(g, h, h, &layer.attn, AttnMask::Full);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.ln2);
            let f = self.ffn(g, h, layer.ff1, layer.ff2);
            x = g.add(x, f);
        }
        self.norm(g, x, ids.enc_ln)
    }

    pub fn encode(&self, g: &mut Graph, scene: &Scene, hla: Option<&Hla>) -> Var {
        let f = self.features(scene, hla);
        self.encode_features(g, &f)
    }

    /// Encoder memory without gradient recording.
    pub fn encode_scene(&self, scene: &Scene, hla: Option<&Hla>) -> Tensor {
        let mut g = Graph::no_grad();
        let m = self.encode(&mut g, scene, hla);
        let (r, c) = g.shape(m);
        Tensor::from_vec(&[r, c], g.value(m).to_vec()).expect("shape")
    }

    /// Runs the decoder over blocks of equal-length input ids (each block
    /// starts with the begin-of-sequence id). Returns `(hidden, logits)`.
    pub fn decode(&self, g: &mut Graph, memory: Var, inputs: &[Vec<usize>]) -> (Var, Var) {
        let ids = &self.ids.0;
        let len = inputs[0].len();
        assert!(inputs.iter().all(|b| b.len() == len), "decoder blocks must share a length");
        assert!(len <= self.config.horizon_steps + 1, "decoder input longer than the horizon");
        let flat: Vec<usize> = inputs.concat();
        let positions: Vec<usize> = (0..inputs.len()).flat_map(|_| 0..len).collect();
        let tok = g.param(&self.params, ids.tok_emb);
        let pos = g.param(&self.params, ids.pos_emb);
        let te = g.embed(tok, &flat);
        let pe = g.embed(pos, &positions);
        let mut x = g.add(te, pe);
        for layer in &ids.dec {
            let h = self.norm(g, x, layer.ln1);
            let a = self.mha(g, h, h, &layer.self_attn, AttnMask::BlockCausal(len));
            x = g.add(x, a);
            let h = self.norm(g, x, layer.ln2);
            let a = self.mha(g, h, memory, &layer.cross, AttnMask::Full);
            x = g.add(x, a);
            let h = self.norm(g, x, layer.ln3);
            let f = self.ffn(g, h, layer.ff1, layer.ff2);
            x = g.add(x, f);
        }
        let hidden = self.norm(g, x, ids.dec_ln);
        let logits = self.lin(g, hidden, ids.out);
        (hidden, logits)
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<(), NnError> {
        if seq.len() != self.config.horizon_steps {
            return Err(NnError::SequenceLength {
                expected: self.config.horizon_steps,
                found: seq.len(),
            });
        }
        self.check_tokens(seq)
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<(), NnError> {
        let motion = self.config.vocab.motion_tokens();
        match seq.0.iter().position(|&t| t as usize >= motion) {
            Some(position) => Err(TokenError::InvalidToken {
                id: seq.0[position],
                position,
                motion_tokens: motion,
            }
            .into()),
            None => Ok(()),
        }
    }

    /// Teacher-forcing input: begin-of-sequence followed by all but the last token.
    fn shifted(&self, seq: &TokenSequence) -> Vec<usize> {
        std::iter::once(self.config.vocab.bos() as usize)
            .chain(seq.0[..seq.len() - 1].iter().map(|&t| t as usize))
            .collect()
    }

    /// Sequence log-probabilities of full-horizon sequences for one scene.
    pub fn sequence_logprobs(
        &self,
        g: &mut Graph,
        memory: Var,
        seqs: &[&TokenSequence],
    ) -> Result<Encoded, NnError> {
        if seqs.is_empty() {
            return Err(NnError::Usage("no sequences to score".into()));
        }
        for s in seqs {
            self.check_sequence(s)?;
        }
        let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| self.shifted(s)).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.0.iter().map(|&t| t as usize)).collect();
        let (hidden, logits) = self.decode(g, memory, &inputs);
        let picked = g.pick_log_softmax(logits, &targets);
        let logprobs = g.segment_sum(picked, self.config.horizon_steps);
        Ok(Encoded { logprobs, hidden })
    }

    /// `log p(seq | scene)` without gradient recording; finite and at most 0.
    pub fn sequence_logprob(&self, scene: &Scene, hla: Option<&Hla>, seq: &TokenSequence) -> Result<f64, NnError> {
        let mut g = Graph::no_grad();
        let m = self.encode(&mut g, scene, hla);
        let e = self.sequence_logprobs(&mut g, m, &[seq])?;
        Ok(g.scalar(e.logprobs))
    }

    /// Logits for every position after `prefix`, shape `(prefix + 1) x motion_tokens`.
    pub fn decoder_logits(&self, scene: &Scene, hla: Option<&Hla>, prefix: &TokenSequence) -> Result<Tensor, NnError> {
        if prefix.len() > self.config.horizon_steps {
            return Err(NnError::SequenceLength {
                expected: self.config.horizon_steps,
                found: prefix.len(),
            });
        }
        self.check_tokens(prefix)?;
        let mut g = Graph::no_grad();
        let m = self.encode(&mut g, scene, hla);
        let input: Vec<usize> = std::iter::once(self.config.vocab.bos() as usize)
            .chain(prefix.0.iter().map(|&t| t as usize))
            .collect();
        let (_, logits) = self.decode(&mut g, m, &[input]);
        let (r, c) = g.shape(logits);
        Ok(Tensor::from_vec(&[r, c], g.value(logits).to_vec()).expect("shape"))
    }

    /// Auxiliary classifier logits from the mean of `rows` hidden states.
    pub fn hla_logits(&self, g: &mut Graph, hidden: Var) -> HlaLogits {
        let ids = &self.ids.0;
        let m = g.mean_rows(hidden);
        let h = self.lin(g, m, ids.aux_hidden);
        let h = g.gelu(h);
        HlaLogits {
            maneuver: self.lin(g, h, ids.aux_maneuver),
            direction: self.lin(g, h, ids.aux_direction),
            speed: self.lin(g, h, ids.aux_speed),
        }
    }

    pub(super) fn cache_layout(&self) -> CacheLayout<'_> {
        CacheLayout { model: self }
    }
}

/// Read access to raw parameter slices for the cached decoder.
pub(super) struct CacheLayout<'a> {
    model: &'a ForecastModel,
}

pub(super) struct LinearRef<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub out: usize,
}

pub(super) struct DecLayerRef<'a> {
    pub ln1: (&'a [f64], &'a [f64]),
    pub self_attn: [LinearRef<'a>; 4],
    pub ln2: (&'a [f64], &'a [f64]),
    pub cross: [LinearRef<'a>; 4],
    pub ln3: (&'a [f64], &'a [f64]),
    pub ff1: LinearRef<'a>,
    pub ff2: LinearRef<'a>,
}

impl<'a> CacheLayout<'a> {
    fn lin(&self, l: Linear) -> LinearRef<'a> {
        let w = self.model.params.get(l.w);
        LinearRef {
            w: &w.data,
            b: &self.model.params.get(l.b).data,
            out: w.cols(),
        }
    }

    fn norm(&self, n: Norm) -> (&'a [f64], &'a [f64]) {
        (&self.model.params.get(n.g).data, &self.model.params.get(n.b).data)
    }

    fn attn(&self, a: &AttnParams) -> [LinearRef<'a>; 4] {
        [self.lin(a.q), self.lin(a.k), self.lin(a.v), self.lin(a.o)]
    }

    pub fn layers(&self) -> Vec<DecLayerRef<'a>> {
        self.model
            .ids
            .0
            .dec
            .iter()
            .map(|l| DecLayerRef {
                ln1: self.norm(l.ln1),
                self_attn: self.attn(&l.self_attn),
                ln2: self.norm(l.ln2),
                cross: self.attn(&l.cross),
                ln3: self.norm(l.ln3),
                ff1: self.lin(l.ff1),
                ff2: self.lin(l.ff2),
            })
            .collect()
    }

    pub fn tok_emb(&self) -> &'a Tensor {
        self.model.params.get(self.model.ids.0.tok_emb)
    }

    pub fn pos_emb(&self) -> &'a Tensor {
        self.model.params.get(self.model.ids.0.pos_emb)
    }

    pub fn final_norm(&self) -> (&'a [f64], &'a [f64]) {
        self.norm(self.model.ids.0.dec_ln)
    }

    pub fn out(&self) -> LinearRef<'a> {
        self.lin(self.model.ids.0.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::graph::Gradients;
    use crate::nnet::tensor::log_softmax;
    use crate::scene::{generate_corpus, GeneratorConfig};
    use crate::tokenizer::tokenize;
    use rand::Rng;

    fn scenes(n: usize) -> Vec<Scene> {
        generate_corpus(11, n, &GeneratorConfig::default())
            .unwrap()
            .into_iter()
            .map(|l| l.scene)
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ForecastModel::new(ModelConfig::default(), 5).unwrap();
        let b = ForecastModel::new(ModelConfig::default(), 5).unwrap();
        let c = ForecastModel::new(ModelConfig::default(), 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            d_model: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(ForecastModel::new(cfg, 0), Err(NnError::Config(_))));
    }

    #[test]
    fn logits_shape_normalization_and_init_scale() {
        let m = ForecastModel::new(ModelConfig::default(), 1).unwrap();
        let s = &scenes(1)[0];
        let seq = tokenize(&s.ego_future, m.vocab());
        let prefix = TokenSequence(seq.0[..4].to_vec());
        let l = m.decoder_logits(s, None, &prefix).unwrap();
        assert_eq!(l.shape, vec![5, 169]);
        for r in 0..5 {
            let row = l.row(r);
            let total: f64 = log_softmax(row).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let sd = (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
            assert!(sd > 0.0 && sd < 10.0, "row std {sd}");
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = ForecastModel::new(small(), 2).unwrap();
        let s = &scenes(1)[0];
        let base = TokenSequence(vec![90, 91, 92, 93, 94, 95, 96, 97, 98, 99]);
        let full = m.decoder_logits(s, None, &base).unwrap();
        for k in 0..10 {
            let mut changed = base.clone();
            changed.0[k] = 3;
            let other = m.decoder_logits(s, None, &changed).unwrap();
            // row t sees tokens < t, i.e. inputs up to index t
            for t in 0..=k {
                assert_eq!(full.row(t), other.row(t), "row {t} changed after editing token {k}");
            }
            assert_ne!(full.row(k + 1), other.row(k + 1));
        }
    }

    #[test]
    fn uniform_logits_give_minus_t_log_v() {
        let mut m = ForecastModel::new(ModelConfig::default(), 3).unwrap();
        for name in ["dec.out.w", "dec.out.b"] {
            m.params.by_name_mut(name).unwrap().data.fill(0.0);
        }
        let s = &scenes(1)[0];
        let seq = tokenize(&s.ego_future, m.vocab());
        let lp = m.sequence_logprob(s, None, &seq).unwrap();
        let v = m.vocab().motion_tokens() as f64;
        assert!((lp + 10.0 * v.ln()).abs() < 1e-9, "{lp}");
    }

    #[test]
    fn exhaustive_length_two_sequences_sum_to_one() {
        // three longitudinal bins and a single lateral bin: 3 motion tokens
        let cfg = ModelConfig {
            vocab: MotionVocab {
                delta_bins_per_axis: 3,
                bin_size: 0.5,
                lateral_bins: Some(1),
            },
            horizon_steps: 2,
            ..small()
        };
        let m = ForecastModel::new(cfg, 4).unwrap();
        let s = &scenes(1)[0];
        let k = m.vocab().motion_tokens() as u32;
        assert_eq!(k, 3);
        let mut total = 0.0;
        for a in 0..k {
            for b in 0..k {
                total += m.sequence_logprob(s, None, &TokenSequence(vec![a, b])).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn agent_order_does_not_change_outputs() {
        let m = ForecastModel::new(small(), 5).unwrap();
        let s = scenes(20).into_iter().find(|s| s.agents.len() >= 2).expect("scene with agents");
        let mut p = s.clone();
        p.agents.reverse();
        let seq = tokenize(&s.ego_future, m.vocab());
        let a = m.sequence_logprob(&s, None, &seq).unwrap();
        let b = m.sequence_logprob(&p, None, &seq).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bad_sequences_are_rejected() {
        let m = ForecastModel::new(small(), 6).unwrap();
        let s = &scenes(1)[0];
        assert!(matches!(
            m.sequence_logprob(s, None, &TokenSequence(vec![1, 2])),
            Err(NnError::SequenceLength { .. })
        ));
        assert!(matches!(
            m.sequence_logprob(s, None, &TokenSequence(vec![169; 10])),
            Err(NnError::Token(_))
        ));
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut m = ForecastModel::new(small(), 7).unwrap();
        // spread the weights so every path carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..m.params.len() {
            for v in &mut m.params.get_mut(i).data {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let ss = scenes(3);
        let s = &ss[1];
        let seqs: Vec<TokenSequence> = ss.iter().map(|x| tokenize(&x.ego_future, m.vocab())).collect();
        let loss = |m: &ForecastModel, g: &mut Graph| {
            let mem = m.encode(g, s, None);
            let e = m.sequence_logprobs(g, mem, &[&seqs[0], &seqs[1]]).unwrap();
            let h = m.hla_logits(g, e.hidden);
            let a = g.pick_log_softmax(h.maneuver, &[3]);
            let sum = g.sum(e.logprobs);
            g.add(sum, a)
        };
        let mut g = Graph::new();
        let out = loss(&m, &mut g);
        let mut grads = Gradients::zeros_like(&m.params);
        g.backward(out, &mut grads).unwrap();
        let eps = 1e-4;
        let mut checked = 0;
        for _ in 0..60 {
            let id = rng.random_range(0..m.params.len());
            let i = rng.random_range(0..m.params.get(id).len());
            let orig = m.params.get(id).data[i];
            let mut eval = |x: f64| {
                m.params.get_mut(id).data[i] = x;
                let mut g = Graph::no_grad();
                let o = loss(&m, &mut g);
                g.scalar(o)
            };
            let fd = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
            m.params.get_mut(id).data[i] = orig;
            let an = grads.grads[id][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3, "{} [{i}]: analytic {an} fd {fd}", m.params.name(id));
            checked += 1;
        }
        assert_eq!(checked, 60);
    }
}
