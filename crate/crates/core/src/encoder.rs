//! Bidirectional LSTM encoder.
//!
//! Each source position gets an annotation `b_i` of width `4d`:
//! `[forward h; forward c; backward h; backward c]`, where the forward
//! state has read `tokens[..=i]` and the backward state `tokens[i..]`.

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, ParamId, ParamSet, Tensor};

/// Gate blocks inside the `4d` pre-activation, in this order.
const GATE_INPUT: usize = 0;
const GATE_FORGET: usize = 1;
const GATE_OUTPUT: usize = 2;
const GATE_CANDIDATE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    /// `input × 4d`
    pub w_input: ParamId,
    /// `d × 4d`
    pub w_recurrent: ParamId,
    /// `4d`
    pub bias: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCell {
    pub fn new(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            w_input: params.add(format!("{prefix}.w_input"), Tensor::zeros(vec![input, 4 * hidden])),
            w_recurrent: params.add(
                format!("{prefix}.w_recurrent"),
                Tensor::zeros(vec![hidden, 4 * hidden]),
            ),
            bias: params.add(format!("{prefix}.bias"), Tensor::zeros(vec![4 * hidden])),
            hidden,
            input,
        }
    }
}

/// `(h, c)` pair of graph nodes, each of width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, d: usize) -> Self {
        LstmState {
            h: g.vector(vec![0.0; d]),
            c: g.vector(vec![0.0; d]),
        }
    }
}

/// One standard LSTM recurrence step with sigmoid gates and tanh squashing.
pub fn lstm_step(g: &mut Graph, cell: &LstmCell, x: NodeId, prev: LstmState) -> Result<LstmState> {
    let d = cell.hidden;
    if g.shape(x).iter().product::<usize>() != cell.input {
        return Err(Error::shape(
            "lstm_step",
            format!("input {:?}, cell expects {}", g.shape(x), cell.input),
        ));
    }
    for (what, n) in [("h", prev.h), ("c", prev.c)] {
        if g.shape(n).iter().product::<usize>() != d {
            return Err(Error::shape(
                "lstm_step",
                format!("{what} {:?}, cell hidden {d}", g.shape(n)),
            ));
        }
    }
    let wx = g.param(cell.w_input);
    let wh = g.param(cell.w_recurrent);
    let b = g.param(cell.bias);
    let from_x = g.vecmat(x, wx)?;
    let from_h = g.vecmat(prev.h, wh)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.add(pre, b)?;

    let block = |g: &mut Graph, k: usize| g.slice(pre, k * d, d);
    let i = block(g, GATE_INPUT)?;
    let i = g.sigmoid(i);
    let f = block(g, GATE_FORGET)?;
    let f = g.sigmoid(f);
    let o = block(g, GATE_OUTPUT)?;
    let o = g.sigmoid(o);
    let cand = block(g, GATE_CANDIDATE)?;
    let cand = g.tanh(cand);

    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let squashed = g.tanh(c);
    let h = g.mul(o, squashed)?;
    Ok(LstmState { h, c })
}

/// Token-index → vector lookup table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(params: &mut ParamSet, name: &str, rows: usize, dim: usize) -> Self {
        Embedding {
            table: params.add(name, Tensor::zeros(vec![rows, dim])),
            rows,
            dim,
        }
    }

    pub fn lookup(&self, g: &mut Graph, index: usize) -> Result<NodeId> {
        let t = g.param(self.table);
        g.row(t, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: Embedding,
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// `4d × d` projection to the decoder's initial hidden state.
    pub init_weight: ParamId,
    pub init_bias: ParamId,
    pub hidden: usize,
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// One `4d` node per source position.
    pub annotations: Vec<NodeId>,
    /// The same annotations stacked as an `m × 4d` matrix.
    pub matrix: NodeId,
    /// Decoder initial state.
    pub s0: LstmState,
}

impl Encoder {
    pub fn new(params: &mut ParamSet, src_vocab: usize, embed: usize, hidden: usize) -> Self {
        let embedding = Embedding::new(params, "encoder.embedding", src_vocab, embed);
        let forward = LstmCell::new(params, "encoder.forward", embed, hidden);
        let backward = LstmCell::new(params, "encoder.backward", embed, hidden);
        let init_weight = params.add("encoder.init_weight", Tensor::zeros(vec![4 * hidden, hidden]));
        let init_bias = params.add("encoder.init_bias", Tensor::zeros(vec![hidden]));
        Encoder {
            embedding,
            forward,
            backward,
            init_weight,
            init_bias,
            hidden,
        }
    }

    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::Empty("source sequence".into()));
        }
        let d = self.hidden;
        let inputs = tokens
            .iter()
            .map(|&t| self.embedding.lookup(g, t))
            .collect::<Result<Vec<_>>>()?;

        let mut fwd = Vec::with_capacity(tokens.len());
        let mut state = LstmState::zeros(g, d);
        for &x in &inputs {
            state = lstm_step(g, &self.forward, x, state)?;
            fwd.push(state);
        }
        let mut bwd = vec![state; tokens.len()];
        let mut state = LstmState::zeros(g, d);
        for (i, &x) in inputs.iter().enumerate().rev() {
            state = lstm_step(g, &self.backward, x, state)?;
            bwd[i] = state;
        }

        let annotations: Vec<NodeId> = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| g.concat(&[f.h, f.c, b.h, b.c]))
            .collect();
        let matrix = g.stack_rows(&annotations)?;

        let last = fwd[tokens.len() - 1];
        let first = bwd[0];
        let summary = g.concat(&[last.h, last.c, first.h, first.c]);
        let w = g.param(self.init_weight);
        let b = g.param(self.init_bias);
        let proj = g.vecmat(summary, w)?;
        let proj = g.add(proj, b)?;
        let h = g.tanh(proj);
        let c = g.vector(vec![0.0; d]);
        Ok(Encoded {
            annotations,
            matrix,
            s0: LstmState { h, c },
        })
    }
}
