//! Attention decoder with a joint output distribution over three
//! segments: target-vocabulary writes, source-position copies, and a gated
//! cache over the whole source vocabulary.
//!
//! Per step `j`, with decoder state `s` (width `d`) and annotations `b_i`
//! (width `4d`):
//!
//! ```text
//! q       = sᵀ W_a                      (4d)
//! e_i     = q · b_i                     copy scores, one per position
//! α       = softmax(e)
//! c       = Σ_i α_i b_i                 context (4d)
//! z       = σ(sᵀ U_z + cᵀ W_z)          reset gate over |V_s|
//! logits  = [ U_wᵀ[s; c] | e | z ⊙ f(s, c) ]
//! P       = softmax(logits)
//! ```
//!
//! Attention weights come from the copy scores alone; the gate and the
//! cache scores are computed after `c` and never feed back into `α`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, EOS_TOKEN, UNK};
use crate::encoder::{lstm_step, Embedding, Encoded, LstmCell, LstmState};
use crate::error::{Error, Result};
use crate::numcore::{softmax, Graph, NodeId, ParamId, ParamSet, Tensor};

/// Which cache function fills the third segment, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CacheKind {
    /// No cache segment: write and copy only.
    Off,
    /// `sᵀ W_a W_h`
    #[default]
    F1,
    /// `σ(sᵀ W_a W_h)`
    F2,
    /// `σ(sᵀ W_a W_h + cᵀ W_h)`
    F3,
    /// `σ(sᵀ U_z)`
    F4,
    /// `tanh(sᵀ U_z)`
    F5,
    /// `z ⊙ σ(sᵀ W_a W_h) + (1 − z) ⊙ σ(cᵀ W_h)`
    F6,
}

impl CacheKind {
    pub const ALL: [CacheKind; 6] = [
        CacheKind::F1,
        CacheKind::F2,
        CacheKind::F3,
        CacheKind::F4,
        CacheKind::F5,
        CacheKind::F6,
    ];

    pub fn is_enabled(self) -> bool {
        self != CacheKind::Off
    }

    /// Whether raw scores are guaranteed nonnegative.
    pub fn nonnegative(self) -> bool {
        matches!(self, CacheKind::F2 | CacheKind::F3 | CacheKind::F4 | CacheKind::F6)
    }
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CacheKind::Off => "off",
            CacheKind::F1 => "f1",
            CacheKind::F2 => "f2",
            CacheKind::F3 => "f3",
            CacheKind::F4 => "f4",
            CacheKind::F5 => "f5",
            CacheKind::F6 => "f6",
        };
        f.write_str(s)
    }
}

impl FromStr for CacheKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "off" | "none" | "copy" => CacheKind::Off,
            "f1" => CacheKind::F1,
            "f2" => CacheKind::F2,
            "f3" => CacheKind::F3,
            "f4" => CacheKind::F4,
            "f5" => CacheKind::F5,
            "f6" => CacheKind::F6,
            other => return Err(Error::Config(format!("unknown cache function {other:?}"))),
        })
    }
}

/// `W_a: d × 4d`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_a: ParamId,
}

/// `W_h: 4d × |V_s|`, `U_z: d × |V_s|`, `W_z: 4d × |V_s|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheParams {
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub w_z: ParamId,
}

/// `U_w: 5d × |V_t|`, applied to `[s; c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputParams {
    pub u_w: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `sᵀ W_a`
    pub query: NodeId,
    /// Copy scores `e`, one per source position.
    pub scores: NodeId,
    pub alpha: NodeId,
    pub context: NodeId,
}

/// Bilinear attention of `s` over the stacked `m × 4d` annotation matrix.
pub fn attend(
    g: &mut Graph,
    s: NodeId,
    annotations: NodeId,
    attn: &AttentionParams,
) -> Result<Attention> {
    let w_a = g.param(attn.w_a);
    let query = g.vecmat(s, w_a)?;
    let scores = g.matvec(annotations, query)?;
    let alpha = g.softmax(scores)?;
    let context = g.vecmat(alpha, annotations)?;
    Ok(Attention {
        query,
        scores,
        alpha,
        context,
    })
}

/// `z = σ(sᵀ U_z + cᵀ W_z)`
pub fn reset_gate(g: &mut Graph, s: NodeId, c: NodeId, cache: &CacheParams) -> Result<NodeId> {
    let u_z = g.param(cache.u_z);
    let w_z = g.param(cache.w_z);
    let a = g.vecmat(s, u_z)?;
    let b = g.vecmat(c, w_z)?;
    let pre = g.add(a, b)?;
    Ok(g.sigmoid(pre))
}

/// Raw (un-gated) cache scores over the source vocabulary.
///
/// `query` is `sᵀ W_a` from [`attend`]. `z` is required for F6.
pub fn cache_scores(
    g: &mut Graph,
    kind: CacheKind,
    s: NodeId,
    c: NodeId,
    query: NodeId,
    z: Option<NodeId>,
    cache: &CacheParams,
) -> Result<NodeId> {
    let w_h = g.param(cache.w_h);
    Ok(match kind {
        CacheKind::Off => return Err(Error::Config("cache scores requested with cache off".into())),
        CacheKind::F1 => g.vecmat(query, w_h)?,
        CacheKind::F2 => {
            let v = g.vecmat(query, w_h)?;
            g.sigmoid(v)
        }
        CacheKind::F3 => {
            let sum = g.add(query, c)?;
            let v = g.vecmat(sum, w_h)?;
            g.sigmoid(v)
        }
        CacheKind::F4 => {
            let u_z = g.param(cache.u_z);
            let v = g.vecmat(s, u_z)?;
            g.sigmoid(v)
        }
        CacheKind::F5 => {
            let u_z = g.param(cache.u_z);
            let v = g.vecmat(s, u_z)?;
            g.tanh(v)
        }
        CacheKind::F6 => {
            let z = z.ok_or_else(|| Error::Config("f6 needs the reset gate z".into()))?;
            let a = g.vecmat(query, w_h)?;
            let a = g.sigmoid(a);
            let b = g.vecmat(c, w_h)?;
            let b = g.sigmoid(b);
            let one_minus_z = g.affine(z, -1.0, 1.0);
            let left = g.mul(z, a)?;
            let right = g.mul(one_minus_z, b)?;
            g.add(left, right)?
        }
    })
}

/// Concatenated logits `[U_wᵀ[s; c] | copy | gated cache]`.
pub fn joint_logits(
    g: &mut Graph,
    s: NodeId,
    c: NodeId,
    copy_scores: NodeId,
    gated_cache: Option<NodeId>,
    output: &OutputParams,
) -> Result<NodeId> {
    let sc = g.concat(&[s, c]);
    let u_w = g.param(output.u_w);
    let write = g.vecmat(sc, u_w)?;
    Ok(match gated_cache {
        Some(cache) => g.concat(&[write, copy_scores, cache]),
        None => g.concat(&[write, copy_scores]),
    })
}

/// Which part of the joint distribution an index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Write(usize),
    Copy(usize),
    Cache(usize),
}

impl Segment {
    pub fn label(self) -> &'static str {
        match self {
            Segment::Write(_) => "write",
            Segment::Copy(_) => "copy",
            Segment::Cache(_) => "cache",
        }
    }
}

/// Sizes of the three segments of the concatenated index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub write: usize,
    pub copy: usize,
    pub cache: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.write + self.copy + self.cache
    }

    pub fn segment(&self, index: usize) -> Segment {
        if index < self.write {
            Segment::Write(index)
        } else if index < self.write + self.copy {
            Segment::Copy(index - self.write)
        } else {
            debug_assert!(index < self.total());
            Segment::Cache(index - self.write - self.copy)
        }
    }

    pub fn index(&self, seg: Segment) -> usize {
        match seg {
            Segment::Write(w) => w,
            Segment::Copy(i) => self.write + i,
            Segment::Cache(v) => self.write + self.copy + v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub layout: Layout,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl JointDistribution {
    pub fn from_logits(logits: Vec<f64>, layout: Layout) -> Result<Self> {
        if logits.len() != layout.total() {
            return Err(Error::shape(
                "joint_distribution",
                format!("{} logits for layout {layout:?}", logits.len()),
            ));
        }
        let probs = softmax(&logits)?;
        Ok(JointDistribution {
            layout,
            logits,
            probs,
        })
    }

    pub fn write(&self) -> &[f64] {
        &self.probs[..self.layout.write]
    }

    pub fn copy(&self) -> &[f64] {
        &self.probs[self.layout.write..self.layout.write + self.layout.copy]
    }

    pub fn cache(&self) -> &[f64] {
        &self.probs[self.layout.write + self.layout.copy..]
    }

    /// Argmax with ties broken by lowest concatenated index.
    pub fn best(&self) -> Segment {
        self.layout.segment(crate::numcore::argmax(&self.probs))
    }
}

/// Resolves an index of the joint space to a surface token.
pub fn resolve<'a>(
    seg: Segment,
    source: &'a [String],
    src_vocab: &'a Vocabulary,
    tgt_vocab: &'a Vocabulary,
) -> &'a str {
    match seg {
        Segment::Write(w) => tgt_vocab.token(w),
        Segment::Copy(i) => &source[i],
        Segment::Cache(v) => src_vocab.token(v),
    }
}

/// Every joint index whose resolved surface equals the gold token.
///
/// `copy_row[i]` marks source positions equal to the gold surface.
/// Returns the indices and whether the gold token was reachable at all;
/// when it is not, the write-UNK index stands in.
pub fn gold_indices(
    layout: &Layout,
    gold_index: usize,
    gold_surface: &str,
    copy_row: &[bool],
    src_vocab: &Vocabulary,
) -> (Vec<usize>, bool) {
    let mut out = Vec::new();
    if gold_index != UNK {
        out.push(layout.index(Segment::Write(gold_index)));
    }
    for (i, _) in copy_row.iter().enumerate().filter(|(_, &hit)| hit) {
        out.push(layout.index(Segment::Copy(i)));
    }
    if layout.cache > 0 {
        if let Some(v) = src_vocab.get(gold_surface).filter(|&v| v != UNK) {
            out.push(layout.index(Segment::Cache(v)));
        }
    }
    if out.is_empty() {
        (vec![layout.index(Segment::Write(UNK))], false)
    } else {
        (out, true)
    }
}

/// `−log Σ P(k)` over the gold indices of one step.
pub fn step_loss(g: &mut Graph, logits: NodeId, gold: &[usize]) -> Result<NodeId> {
    g.neg_log_marginal(logits, gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decoder {
    pub embedding: Embedding,
    pub cell: LstmCell,
    pub attention: AttentionParams,
    pub output: OutputParams,
    pub cache: Option<CacheParams>,
    pub hidden: usize,
}

/// Graph nodes produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: LstmState,
    pub attention: Attention,
    pub gate: Option<NodeId>,
    pub cache_raw: Option<NodeId>,
    pub logits: NodeId,
}

impl Decoder {
    pub fn new(
        params: &mut ParamSet,
        tgt_vocab: usize,
        embed: usize,
        hidden: usize,
    ) -> Self {
        let d = hidden;
        let embedding = Embedding::new(params, "decoder.embedding", tgt_vocab, embed);
        let cell = LstmCell::new(params, "decoder.lstm", embed, d);
        let attention = AttentionParams {
            w_a: params.add("decoder.w_a", Tensor::zeros(vec![d, 4 * d])),
        };
        let output = OutputParams {
            u_w: params.add("decoder.u_w", Tensor::zeros(vec![5 * d, tgt_vocab])),
        };
        Decoder {
            embedding,
            cell,
            attention,
            output,
            cache: None,
            hidden,
        }
    }

    /// Adds the cache parameters; created last so that the other tensors
    /// keep their positions and initial values.
    pub fn add_cache(&mut self, params: &mut ParamSet, src_vocab: usize) {
        let d = self.hidden;
        self.cache = Some(CacheParams {
            w_h: params.add("cache.w_h", Tensor::zeros(vec![4 * d, src_vocab])),
            u_z: params.add("cache.u_z", Tensor::zeros(vec![d, src_vocab])),
            w_z: params.add("cache.w_z", Tensor::zeros(vec![4 * d, src_vocab])),
        });
    }

    pub fn layout(&self, kind: CacheKind, m: usize, g: &Graph) -> Layout {
        let cache = match (kind.is_enabled(), self.cache) {
            (true, Some(c)) => g.params().get(c.w_h).shape()[1],
            _ => 0,
        };
        Layout {
            write: self.embedding.rows,
            copy: m,
            cache,
        }
    }

    /// One decoder step fed the target-vocabulary token `prev_token`.
    ///
    /// With `double_gate` off, F6 skips the outer `z ⊙` since it already
    /// mixes with `z` internally.
    pub fn step(
        &self,
        g: &mut Graph,
        kind: CacheKind,
        double_gate: bool,
        enc: &Encoded,
        prev: LstmState,
        prev_token: usize,
    ) -> Result<StepOutput> {
        let x = self.embedding.lookup(g, prev_token)?;
        let state = lstm_step(g, &self.cell, x, prev)?;
        let s = state.h;
        let attention = attend(g, s, enc.matrix, &self.attention)?;
        let c = attention.context;

        let (gate, cache_raw, gated) = if kind.is_enabled() {
            let cache = self.cache.as_ref().ok_or_else(|| {
                Error::Config(format!("cache function {kind} but model has no cache parameters"))
            })?;
            let z = reset_gate(g, s, c, cache)?;
            let raw = cache_scores(g, kind, s, c, attention.query, Some(z), cache)?;
            let gated = if kind == CacheKind::F6 && !double_gate {
                raw
            } else {
                g.mul(z, raw)?
            };
            (Some(z), Some(raw), Some(gated))
        } else {
            (None, None, None)
        };

        let logits = joint_logits(g, s, c, attention.scores, gated, &self.output)?;
        Ok(StepOutput {
            state,
            attention,
            gate,
            cache_raw,
            logits,
        })
    }
}

/// Decoded output with the segment that produced each token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<String>,
    pub origins: Vec<Segment>,
    /// Stopped by `max_len` rather than EOS.
    pub truncated: bool,
}

/// Greedy argmax decoding until EOS or `max_len` tokens.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    g: &mut Graph,
    decoder: &Decoder,
    kind: CacheKind,
    double_gate: bool,
    enc: &Encoded,
    source: &[String],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<Decoded> {
    let mut state = enc.s0;
    let mut prev = crate::data::BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        origins: Vec::new(),
        truncated: false,
    };
    let layout = decoder.layout(kind, source.len(), g);
    loop {
        if out.tokens.len() == max_len {
            out.truncated = true;
            return Ok(out);
        }
        let step = decoder.step(g, kind, double_gate, enc, state, prev)?;
        let dist = JointDistribution::from_logits(g.value(step.logits).to_vec(), layout)?;
        let seg = dist.best();
        let token = resolve(seg, source, src_vocab, tgt_vocab);
        if token == EOS_TOKEN {
            return Ok(out);
        }
        prev = tgt_vocab.index_or_unk(token);
        out.tokens.push(token.to_string());
        out.origins.push(seg);
        state = step.state;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{sigmoid, SeededRng};

    fn random_tensor(rng: &mut SeededRng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn matrix_const(g: &mut Graph, rows: &[Vec<f64>]) -> NodeId {
        let width = rows[0].len();
        let flat = rows.iter().flatten().copied().collect();
        g.constant(Tensor::new(vec![rows.len(), width], flat).unwrap())
    }

    #[test]
    fn single_annotation_gets_all_attention() {
        let mut ps = ParamSet::new();
        let mut rng = SeededRng::new(1, 0);
        let w_a = ps.add("w_a", random_tensor(&mut rng, vec![2, 8]));
        let mut g = Graph::new(&ps);
        let s = g.vector(vec![0.4, -0.9]);
        let b = vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, 0.8];
        let ann = matrix_const(&mut g, &[b.clone()]);
        let a = attend(&mut g, s, ann, &AttentionParams { w_a }).unwrap();
        assert_eq!(g.value(a.alpha), &[1.0]);
        assert_eq!(g.value(a.context), b.as_slice());

        let two = matrix_const(&mut g, &[b.clone(), b.clone()]);
        let a = attend(&mut g, s, two, &AttentionParams { w_a }).unwrap();
        assert_eq!(g.value(a.alpha), &[0.5, 0.5]);
        for (x, y) in g.value(a.context).iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_brute_force() {
        let (d, m) = (2, 3);
        let mut rng = SeededRng::new(21, 0);
        let mut ps = ParamSet::new();
        let w_a = ps.add("w_a", random_tensor(&mut rng, vec![d, 4 * d]));
        let s: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..4 * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();

        // e_i = Σ_r Σ_k s_r W[r][k] b_i[k]
        let w = ps.get(w_a).values();
        let e: Vec<f64> = bs
            .iter()
            .map(|b| {
                let mut acc = 0.0;
                for r in 0..d {
                    for k in 0..4 * d {
                        acc += s[r] * w[r * 4 * d + k] * b[k];
                    }
                }
                acc
            })
            .collect();
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let alpha: Vec<f64> = e.iter().map(|x| x.exp() / z).collect();
        let ctx: Vec<f64> = (0..4 * d)
            .map(|k| (0..m).map(|i| alpha[i] * bs[i][k]).sum())
            .collect();

        let mut g = Graph::new(&ps);
        let sn = g.vector(s.clone());
        let ann = matrix_const(&mut g, &bs);
        let a = attend(&mut g, sn, ann, &AttentionParams { w_a }).unwrap();
        for (x, y) in g.value(a.scores).iter().zip(&e) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(a.alpha).iter().zip(&alpha) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(a.context).iter().zip(&ctx) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn cache_params(ps: &mut ParamSet, rng: &mut SeededRng, d: usize, vs: usize) -> CacheParams {
        CacheParams {
            w_h: ps.add("w_h", random_tensor(rng, vec![4 * d, vs])),
            u_z: ps.add("u_z", random_tensor(rng, vec![d, vs])),
            w_z: ps.add("w_z", random_tensor(rng, vec![4 * d, vs])),
        }
    }

    #[test]
    fn reset_gate_cases() {
        let (d, vs) = (2, 5);
        let mut rng = SeededRng::new(4, 0);
        let mut ps = ParamSet::new();
        let cp = cache_params(&mut ps, &mut rng, d, vs);
        let mut g = Graph::new(&ps);
        let s0 = g.vector(vec![0.0; d]);
        let c0 = g.vector(vec![0.0; 4 * d]);
        let z = reset_gate(&mut g, s0, c0, &cp).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.5));

        let s: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..4 * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (u, w) = (ps.get(cp.u_z).values(), ps.get(cp.w_z).values());
        let expected: Vec<f64> = (0..vs)
            .map(|v| {
                let a: f64 = (0..d).map(|r| s[r] * u[r * vs + v]).sum();
                let b: f64 = (0..4 * d).map(|r| c[r] * w[r * vs + v]).sum();
                sigmoid(a + b)
            })
            .collect();
        let sn = g.vector(s);
        let cn = g.vector(c);
        let z = reset_gate(&mut g, sn, cn, &cp).unwrap();
        for (x, y) in g.value(z).iter().zip(&expected) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn reset_gate_saturates_to_zero() {
        let (d, vs) = (1, 3);
        let mut ps = ParamSet::new();
        let cp = CacheParams {
            w_h: ps.add("w_h", Tensor::zeros(vec![4, vs])),
            u_z: ps.add("u_z", Tensor::new(vec![1, vs], vec![-1e3; vs]).unwrap()),
            w_z: ps.add("w_z", Tensor::zeros(vec![4, vs])),
        };
        let mut g = Graph::new(&ps);
        let s = g.vector(vec![1.0; d]);
        let c = g.vector(vec![0.0; 4]);
        let z = reset_gate(&mut g, s, c, &cp).unwrap();
        assert!(g.value(z).iter().all(|&v| v < 1e-300));
    }

    #[test]
    fn cache_function_identities() {
        let (d, vs) = (2, 4);
        let mut ps = ParamSet::new();
        let zero = CacheParams {
            w_h: ps.add("w_h", Tensor::zeros(vec![4 * d, vs])),
            u_z: ps.add("u_z", Tensor::zeros(vec![d, vs])),
            w_z: ps.add("w_z", Tensor::zeros(vec![4 * d, vs])),
        };
        let mut g = Graph::new(&ps);
        let s = g.vector(vec![0.3, -0.2]);
        let c = g.vector(vec![0.5; 4 * d]);
        let q = g.vector(vec![0.1; 4 * d]);
        let f1 = cache_scores(&mut g, CacheKind::F1, s, c, q, None, &zero).unwrap();
        assert!(g.value(f1).iter().all(|&v| v == 0.0));

        let s0 = g.vector(vec![0.0; d]);
        let f4 = cache_scores(&mut g, CacheKind::F4, s0, c, q, None, &zero).unwrap();
        assert!(g.value(f4).iter().all(|&v| v == 0.5));
        let f5 = cache_scores(&mut g, CacheKind::F5, s0, c, q, None, &zero).unwrap();
        assert!(g.value(f5).iter().all(|&v| v == 0.0));
        assert!(cache_scores(&mut g, CacheKind::F6, s, c, q, None, &zero).is_err());
    }

    #[test]
    fn f6_endpoints_reduce_exactly() {
        let (d, vs) = (3, 6);
        let mut rng = SeededRng::new(17, 0);
        let mut ps = ParamSet::new();
        let cp = cache_params(&mut ps, &mut rng, d, vs);
        let mut g = Graph::new(&ps);
        let s = g.vector((0..d).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let c = g.vector((0..4 * d).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let q = g.vector((0..4 * d).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let ones = g.vector(vec![1.0; vs]);
        let zeros = g.vector(vec![0.0; vs]);
        let f6_one = cache_scores(&mut g, CacheKind::F6, s, c, q, Some(ones), &cp).unwrap();
        let f2 = cache_scores(&mut g, CacheKind::F2, s, c, q, None, &cp).unwrap();
        assert_eq!(g.value(f6_one), g.value(f2));

        let f6_zero = cache_scores(&mut g, CacheKind::F6, s, c, q, Some(zeros), &cp).unwrap();
        let w_h = g.param(cp.w_h);
        let cw = g.vecmat(c, w_h).unwrap();
        let sig = g.sigmoid(cw);
        assert_eq!(g.value(f6_zero), g.value(sig));
    }

    #[test]
    fn equal_logits_give_uniform_distribution() {
        let layout = Layout { write: 4, copy: 3, cache: 5 };
        let d = JointDistribution::from_logits(vec![0.7; 12], layout).unwrap();
        for p in &d.probs {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
        assert_eq!(d.best(), Segment::Write(0));
        assert!(JointDistribution::from_logits(vec![0.0; 11], layout).is_err());
    }

    #[test]
    fn zero_gate_cache_mass_vanishes_as_other_logits_grow() {
        let layout = Layout { write: 2, copy: 1, cache: 3 };
        let mut prev = f64::INFINITY;
        for big in [0.0, 5.0, 20.0, 200.0] {
            let logits = vec![big, big, big, 0.0, 0.0, 0.0];
            let d = JointDistribution::from_logits(logits, layout).unwrap();
            let mass: f64 = d.cache().iter().sum();
            assert!(mass < prev);
            prev = mass;
        }
        assert!(prev < 1e-80);
    }

    #[test]
    fn layout_round_trips_indices() {
        let layout = Layout { write: 5, copy: 3, cache: 7 };
        for k in 0..layout.total() {
            assert_eq!(layout.index(layout.segment(k)), k);
        }
        assert_eq!(layout.segment(5), Segment::Copy(0));
        assert_eq!(layout.segment(8), Segment::Cache(0));
    }

    #[test]
    fn gold_indices_collects_every_route() {
        let src = Vocabulary::from_tokens(["a".to_string(), "colorado".to_string()]);
        let layout = Layout { write: 6, copy: 4, cache: src.len() };
        let row = [false, true, false, true];
        let (idx, ok) = gold_indices(&layout, 4, "colorado", &row, &src);
        assert!(ok);
        let cache_v = src.get("colorado").unwrap();
        assert_eq!(idx, vec![4, 7, 9, 10 + cache_v]);

        let (idx, ok) = gold_indices(&layout, 3, "zzz", &[false; 4], &src);
        assert!(ok);
        assert_eq!(idx, vec![3]);

        let (idx, ok) = gold_indices(&layout, UNK, "zzz", &[false; 4], &src);
        assert!(!ok);
        assert_eq!(idx, vec![UNK]);

        let no_cache = Layout { cache: 0, ..layout };
        let (idx, _) = gold_indices(&no_cache, UNK, "colorado", &row, &src);
        assert_eq!(idx, vec![7, 9]);
    }

    /// |V_t| = 2, m = 1, |V_s| = 2: enumerate the five joint entries by
    /// hand and compare the marginal loss.
    #[test]
    fn step_loss_matches_enumeration() {
        let logits = [0.3, -1.2, 0.8, 0.1, -0.4];
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let l = g.vector(logits.to_vec());
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let p: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();

        let write_only = step_loss(&mut g, l, &[1]).unwrap();
        assert!((g.scalar(write_only) + p[1].ln()).abs() < 1e-12);

        let all_routes = step_loss(&mut g, l, &[0, 2, 4]).unwrap();
        assert!((g.scalar(all_routes) + (p[0] + p[2] + p[4]).ln()).abs() < 1e-12);
    }

    #[test]
    fn cache_kind_parsing() {
        for k in CacheKind::ALL {
            assert_eq!(k.to_string().parse::<CacheKind>().unwrap(), k);
        }
        assert_eq!("off".parse::<CacheKind>().unwrap(), CacheKind::Off);
        assert!("f7".parse::<CacheKind>().is_err());
        assert_eq!(CacheKind::default(), CacheKind::F1);
    }
}
