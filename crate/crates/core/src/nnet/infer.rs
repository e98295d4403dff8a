//! Incremental decoding with cached keys and values.
//!
//! Sampling feeds one token per step for a batch of independent sequences
//! that share a scene. Self-attention keys/values of earlier steps and the
//! cross-attention projections of the encoder memory are computed once.

use super::model::{CacheLayout, DecLayerRef, ForecastModel, LinearRef};
use super::tensor::{dot, gelu, matmul_acc, softmax_in_place, Tensor, LN_EPS};

/// `rows x in` times a linear layer, plus bias.
fn linear(x: &[f64], rows: usize, l: &LinearRef<'_>) -> Vec<f64> {
    let inp = l.w.len() / l.out;
    let mut y = Vec::with_capacity(rows * l.out);
    for _ in 0..rows {
        y.extend_from_slice(l.b);
    }
    matmul_acc(x, l.w, &mut y, rows, inp, l.out);
    y
}

fn layer_norm(x: &[f64], d: usize, (g, b): (&[f64], &[f64])) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * is * g[j] + b[j];
        }
    }
    out
}

/// One query row attending over `keys`/`values` (`n x d` each), all heads.
fn attend(q: &[f64], keys: &[f64], values: &[f64], d: usize, heads: usize, out: &mut [f64]) {
    let dh = d / heads;
    let n = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = scale * dot(qh, &keys[j * d + off..j * d + off + dh]);
        }
        softmax_in_place(&mut s);
        let o = &mut out[off..off + dh];
        o.fill(0.0);
        for (j, &p) in s.iter().enumerate() {
            for (ov, &vv) in o.iter_mut().zip(&values[j * d + off..j * d + off + dh]) {
                *ov += p * vv;
            }
        }
    }
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Step-by-step decoder state for `n` sequences conditioned on one memory.
pub struct DecoderCache<'m> {
    layers: Vec<DecLayerRef<'m>>,
    layout: CacheLayout<'m>,
    d: usize,
    heads: usize,
    n: usize,
    step: usize,
    max_steps: usize,
    /// Per layer: cross-attention keys and values of the memory.
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per layer, per sequence: self-attention keys and values so far.
    self_kv: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl<'m> DecoderCache<'m> {
    pub fn new(model: &'m ForecastModel, memory: &Tensor, n: usize) -> Self {
        let layout = model.cache_layout();
        let layers = layout.layers();
        let d = model.config.d_model;
        let rows = memory.rows();
        let cross_kv = layers
            .iter()
            .map(|l| (linear(&memory.data, rows, &l.cross[1]), linear(&memory.data, rows, &l.cross[2])))
            .collect();
        let self_kv = layers.iter().map(|_| vec![(Vec::new(), Vec::new()); n]).collect();
        Self {
            layers,
            layout,
            d,
            heads: model.config.heads,
            n,
            step: 0,
            max_steps: model.config.horizon_steps,
            cross_kv,
            self_kv,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Feeds one input token per sequence (begin-of-sequence at step 0) and
    /// returns next-token logits, `n x motion_tokens` row-major.
    pub fn step(&mut self, tokens: &[u32]) -> Vec<f64> {
        assert_eq!(tokens.len(), self.n);
        assert!(self.step < self.max_steps, "decoder cache exhausted");
        let d = self.d;
        let n = self.n;
        let tok = self.layout.tok_emb();
        let pos = self.layout.pos_emb().row(self.step).to_vec();
        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            let e = tok.row(t as usize);
            x.extend(e.iter().zip(&pos).map(|(a, b)| a + b));
        }
        let mut att = vec![0.0; n * d];
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, d, layer.ln1);
            let q = linear(&h, n, &layer.self_attn[0]);
            let k = linear(&h, n, &layer.self_attn[1]);
            let v = linear(&h, n, &layer.self_attn[2]);
            for s in 0..n {
                let (ck, cv) = &mut self.self_kv[li][s];
                ck.extend_from_slice(&k[s * d..(s + 1) * d]);
                cv.extend_from_slice(&v[s * d..(s + 1) * d]);
                attend(&q[s * d..(s + 1) * d], ck, cv, d, self.heads, &mut att[s * d..(s + 1) * d]);
            }
            add_assign(&mut x, &linear(&att, n, &layer.self_attn[3]));

            let h = layer_norm(&x, d, layer.ln2);
            let q = linear(&h, n, &layer.cross[0]);
            let (mk, mv) = &self.cross_kv[li];
            for s in 0..n {
                attend(&q[s * d..(s + 1) * d], mk, mv, d, self.heads, &mut att[s * d..(s + 1) * d]);
            }
            add_assign(&mut x, &linear(&att, n, &layer.cross[3]));

            let h = layer_norm(&x, d, layer.ln3);
            let mut f = linear(&h, n, &layer.ff1);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            add_assign(&mut x, &linear(&f, n, &layer.ff2));
        }
        let h = layer_norm(&x, d, self.layout.final_norm());
        self.step += 1;
        linear(&h, n, &self.layout.out())
    }
}
