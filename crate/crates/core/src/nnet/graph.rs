//! Reverse-mode differentiation over 2-D values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse and accumulates gradients of
//! a scalar loss into a dense [`Gradients`] buffer aligned with a
//! [`ParamStore`]. The heavy transformer pieces (attention, layer norm,
//! log-softmax selection) are fused nodes with hand-written adjoints.

use std::collections::HashMap;

use super::tensor::{
    dot, gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Tensor,
    LN_EPS,
};
use super::NnError;

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Dense gradient buffer, one array per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: (0..store.len()).map(|i| vec![0.0; store.get(i).len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Rows come in blocks of this length (one block per sequence); a query
    /// sees keys of its own block at or before its position.
    BlockCausal(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    PickLogSoftmax {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    MeanRows(Var),
    SegmentSum(Var, usize),
    Index(Var, usize),
    LogSigmoid(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// A graph whose values can be read but not differentiated.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar");
        n.value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![x])
    }

    /// Leaf bound to parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.rows(), t.cols(), t.data.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(r, c, out, Op::Sub(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c));
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise normalization with learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (`heads` must divide the width).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (rq, d) = self.shape(q);
        let (rk, dk) = self.shape(k);
        assert_eq!(d, dk);
        assert_eq!(self.shape(v), (rk, d));
        assert_eq!(d % heads, 0);
        if let AttnMask::BlockCausal(l) = mask {
            assert_eq!(rq, rk, "block-causal attention is self-attention");
            assert_eq!(rq % l, 0);
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; heads * rq * rk];
        let mut out = vec![0.0; rq * d];
        let mut scores = vec![0.0; rk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..rq {
                let (lo, hi) = key_range(mask, i, rk);
                let qi = &qv[i * d + off..i * d + off + dh];
                let s = &mut scores[lo..hi];
                for (j, sj) in (lo..hi).zip(s.iter_mut()) {
                    *sj = scale * dot(qi, &kv[j * d + off..j * d + off + dh]);
                }
                softmax_in_place(s);
                let prow = &mut probs[(h * rq + i) * rk..(h * rq + i + 1) * rk];
                prow[lo..hi].copy_from_slice(s);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in lo..hi {
                    let p = prow[j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        self.push(
            rq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            out.extend_from_slice(self.value(p));
            r += pr;
        }
        self.push(r, c, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let (n, c) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < n, "embedding id {id} out of range {n}");
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        self.push(ids.len(), c, out, Op::Embed { table, ids: ids.to_vec() })
    }

    /// `log softmax(logits[r])[targets[r]]` for every row, as an `r x 1` column.
    pub fn pick_log_softmax(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(targets.len(), r);
        let lv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            assert!(targets[i] < c, "target {} out of range {c}", targets[i]);
            out[i] = row[targets[i]] - lse;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            r,
            1,
            out,
            Op::PickLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(1, c, out, Op::MeanRows(a))
    }

    /// Sums consecutive groups of `seg` rows of a column vector.
    pub fn segment_sum(&mut self, a: Var, seg: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1);
        assert_eq!(r % seg, 0);
        let out = self.value(a).chunks(seg).map(|ch| ch.iter().sum()).collect();
        self.push(r / seg, 1, out, Op::SegmentSum(a, seg))
    }

    /// Selects one element as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let x = self.value(a)[i];
        self.push(1, 1, vec![x], Op::Index(a, i))
    }

    /// `log(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| log_sigmoid(x)).collect();
        self.push(r, c, out, Op::LogSigmoid(a))
    }

    /// Accumulates `d loss / d param` into `grads` for every parameter leaf.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), NnError> {
        if !self.recording {
            return Err(NnError::Detached);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::Usage("backward needs a scalar loss".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (a, b) in grads.grads[*id].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    let ga = acc(&mut adj, *a, m * k);
                    matmul_nt_acc(&g, self.value(*b), ga, m, n, k);
                    let gb = acc(&mut adj, *b, k * n);
                    matmul_tn_acc(self.value(*a), &g, gb, m, k, n);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, -1.0);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    let gr = acc(&mut adj, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk, 1.0);
                    }
                }
                Op::Scale(a, s) => add_into(acc(&mut adj, *a, g.len()), &g, *s),
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let ga = acc(&mut adj, *a, g.len());
                    for ((o, &x), &gy) in ga.iter_mut().zip(xv).zip(&g) {
                        *o += gy * gelu_grad(x);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).to_vec();
                    {
                        let gg = acc(&mut adj, *gain, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut adj, *bias, c);
                        for chunk in g.chunks(c) {
                            add_into(gb, chunk, 1.0);
                        }
                    }
                    let gx = acc(&mut adj, *x, r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    mask,
                    probs,
                } => {
                    let (rq, d) = (r, c);
                    let rk = self.shape(*k).0;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let mut gq = vec![0.0; rq * d];
                    let mut gk = vec![0.0; rk * d];
                    let mut gv = vec![0.0; rk * d];
                    let mut dp = vec![0.0; rk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..rq {
                            let (lo, hi) = key_range(*mask, i, rk);
                            let prow = &probs[(h * rq + i) * rk..(h * rq + i + 1) * rk];
                            let go = &g[i * d + off..i * d + off + dh];
                            let mut s = 0.0;
                            for j in lo..hi {
                                dp[j] = dot(go, &vv[j * d + off..j * d + off + dh]);
                                s += prow[j] * dp[j];
                            }
                            let qi = &qv[i * d + off..i * d + off + dh];
                            for j in lo..hi {
                                let p = prow[j];
                                let ds = p * (dp[j] - s) * scale;
                                let kj = &kv[j * d + off..j * d + off + dh];
                                for t in 0..dh {
                                    gq[i * d + off + t] += ds * kj[t];
                                    gk[j * d + off + t] += ds * qi[t];
                                    gv[j * d + off + t] += p * go[t];
                                }
                            }
                        }
                    }
                    add_into(acc(&mut adj, *q, rq * d), &gq, 1.0);
                    add_into(acc(&mut adj, *k, rk * d), &gk, 1.0);
                    add_into(acc(&mut adj, *v, rk * d), &gv, 1.0);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        add_into(acc(&mut adj, p, n), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Embed { table, ids } => {
                    let n = self.value(*table).len();
                    let gt = acc(&mut adj, *table, n);
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &g[row * c..(row + 1) * c], 1.0);
                    }
                }
                Op::PickLogSoftmax {
                    logits,
                    targets,
                    probs,
                } => {
                    let lc = self.shape(*logits).1;
                    let gl = acc(&mut adj, *logits, r * lc);
                    for i in 0..r {
                        for j in 0..lc {
                            gl[i * lc + j] -= g[i] * probs[i * lc + j];
                        }
                        gl[i * lc + targets[i]] += g[i];
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut adj, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::MeanRows(a) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = acc(&mut adj, *a, ar * ac);
                    for chunk in ga.chunks_mut(ac) {
                        add_into(chunk, &g, 1.0 / ar as f64);
                    }
                }
                Op::SegmentSum(a, seg) => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut adj, *a, n);
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / seg];
                    }
                }
                Op::Index(a, i) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, *a, n)[*i] += g[0];
                }
                Op::LogSigmoid(a) => {
                    let xv = self.value(*a);
                    let ga = acc(&mut adj, *a, g.len());
                    for ((o, &x), &gy) in ga.iter_mut().zip(xv).zip(&g) {
                        *o += gy * sigmoid(-x);
                    }
                }
            }
        }
        Ok(())
    }
}

fn key_range(mask: AttnMask, i: usize, rk: usize) -> (usize, usize) {
    match mask {
        AttnMask::Full => (0, rk),
        AttnMask::BlockCausal(l) => ((i / l) * l, i + 1),
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += s * b;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
