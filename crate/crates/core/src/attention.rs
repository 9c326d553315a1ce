//! Cross-channel multi-head residual self-attention.
//!
//! Rows of the input are channels. Each head projects the channels into
//! queries, keys and values, forms `Q·Kᵀ/sqrt(d_k) + prev`, normalizes it
//! into attention weights and mixes the value rows. The raw score matrix
//! (before normalization) is handed up to the next layer as its `prev`.
//!
//! An inter-channel layer wraps the attention with a residual connection
//! and a ReLU feed-forward block that has its own residual connection.
//! The global fusion layer runs one more attention module over the top
//! layer's output and mean-pools the channels, so its output width does
//! not depend on how many channels came in.
//!
//! Every operation exists twice: an `*_on` form that records onto a
//! [`Tape`] (used for training), and a plain form over [`Matrix`] values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::normalize::{NormAxis, Normalizer};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionOpts {
    pub mode: Normalizer,
    pub axis: NormAxis,
}

impl AttentionOpts {
    pub fn new(mode: Normalizer) -> Self {
        Self {
            mode,
            axis: NormAxis::QueryRows,
        }
    }
}

/// Query/key/value projections of one head, each `d_in x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl HeadParams {
    pub fn d_in(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    fn validate(&self) -> Result<()> {
        let shape = self.w_q.shape();
        if self.w_k.shape() != shape || self.w_v.shape() != shape {
            return Err(Error::contract("head projections disagree in shape"));
        }
        Ok(())
    }
}

/// All heads of one attention module plus the output projection `E x E`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
}

impl AttentionParams {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn width(&self) -> usize {
        self.w_o.cols()
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::contract("attention needs at least one head"))?;
        for h in &self.heads {
            h.validate()?;
            if h.w_q.shape() != first.w_q.shape() {
                return Err(Error::contract("heads disagree in shape"));
            }
        }
        let concat = first.d_k() * self.heads.len();
        if self.w_o.rows() != concat {
            return Err(Error::contract(format!(
                "output projection has {} rows, concatenated heads are {concat} wide",
                self.w_o.rows()
            )));
        }
        Ok(())
    }
}

/// Position-wise feed-forward block `relu(a·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub ffn: FfnParams,
}

/// Raw per-head score matrices, `C x C` each.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub scores: Vec<Matrix>,
}

impl AttentionState {
    /// All-zero scores: what the first layer sees.
    pub fn zeros(heads: usize, channels: usize) -> Self {
        Self {
            scores: vec![Matrix::zeros(channels, channels); heads],
        }
    }

    pub fn channels(&self) -> usize {
        self.scores.first().map_or(0, Matrix::rows)
    }

    /// The state seen by a channel-permuted input: `P·S·Pᵀ` per head.
    pub fn conjugate(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            scores: self
                .scores
                .iter()
                .map(|s| s.conjugate(perm))
                .collect::<Result<_>>()?,
        })
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.scores.iter().any(|s| s.shape() != (c, c)) {
            return Err(Error::contract("attention state matrices disagree in shape"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape-bound parameter handles

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    pub w_o: Var,
}

#[derive(Debug, Clone)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attention: AttentionVars,
    pub ffn: FfnVars,
}

fn record<'a>(tape: &mut Tape<'a>, m: &'a Matrix, trainable: bool) -> Var {
    if trainable {
        tape.leaf_ref(m)
    } else {
        tape.constant_ref(m)
    }
}

impl HeadParams {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> HeadVars {
        HeadVars {
            w_q: record(tape, &self.w_q, trainable),
            w_k: record(tape, &self.w_k, trainable),
            w_v: record(tape, &self.w_v, trainable),
        }
    }
}

impl AttentionParams {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AttentionVars {
        AttentionVars {
            heads: self.heads.iter().map(|h| h.bind(tape, trainable)).collect(),
            w_o: record(tape, &self.w_o, trainable),
        }
    }
}

impl FfnParams {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> FfnVars {
        FfnVars {
            w1: record(tape, &self.w1, trainable),
            b1: record(tape, &self.b1, trainable),
            w2: record(tape, &self.w2, trainable),
            b2: record(tape, &self.b2, trainable),
        }
    }
}

impl LayerParams {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> LayerVars {
        LayerVars {
            attention: self.attention.bind(tape, trainable),
            ffn: self.ffn.bind(tape, trainable),
        }
    }
}

// ---------------------------------------------------------------------------
// Recorded forward pass

/// Outputs of one attention head on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// `C x d_k` mixed values.
    pub out: Var,
    /// `C x C` raw scores, including `prev`.
    pub scores: Var,
    /// `C x C` normalized attention weights.
    pub weights: Var,
}

/// Outputs of a multi-head attention module on the tape.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub z: Var,
    pub scores: Vec<Var>,
    pub weights: Vec<Var>,
}

pub fn attention_head_on(
    tape: &mut Tape,
    x: Var,
    prev: Var,
    head: &HeadVars,
    opts: AttentionOpts,
) -> Result<HeadNodes> {
    let (c, d_in) = tape.value(x).shape();
    let (wq_rows, d_k) = tape.value(head.w_q).shape();
    if wq_rows != d_in {
        return Err(Error::contract(format!(
            "input has {d_in} features, head expects {wq_rows}"
        )));
    }
    if tape.value(prev).shape() != (c, c) {
        return Err(Error::contract(format!(
            "previous scores are {:?}, input has {c} channels",
            tape.value(prev).shape()
        )));
    }
    let q = tape.matmul(x, head.w_q)?;
    let k = tape.matmul(x, head.w_k)?;
    let v = tape.matmul(x, head.w_v)?;
    let qk = tape.matmul_t(q, k)?;
    let qk = tape.scale(qk, 1.0 / (d_k as f64).sqrt())?;
    let scores = tape.add(qk, prev)?;
    let weights = match opts.axis {
        NormAxis::QueryRows => tape.row_normalize(scores, opts.mode)?,
        NormAxis::KeyColumns => {
            let t = tape.transpose(scores)?;
            let n = tape.row_normalize(t, opts.mode)?;
            tape.transpose(n)?
        }
    };
    let out = tape.matmul(weights, v)?;
    Ok(HeadNodes {
        out,
        scores,
        weights,
    })
}

pub fn multi_head_on(
    tape: &mut Tape,
    x: Var,
    prev: &[Var],
    p: &AttentionVars,
    opts: AttentionOpts,
) -> Result<AttentionNodes> {
    if prev.len() != p.heads.len() {
        return Err(Error::contract(format!(
            "state has {} heads, parameters have {}",
            prev.len(),
            p.heads.len()
        )));
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut scores = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for (head, &pv) in p.heads.iter().zip(prev) {
        let n = attention_head_on(tape, x, pv, head, opts)?;
        outs.push(n.out);
        scores.push(n.scores);
        weights.push(n.weights);
    }
    let concat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let z = tape.matmul(concat, p.w_o)?;
    Ok(AttentionNodes { z, scores, weights })
}

pub fn ffn_on(tape: &mut Tape, a: Var, p: &FfnVars) -> Result<Var> {
    let h = tape.matmul(a, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

/// One inter-channel processing layer; returns `(y, attention nodes)`.
pub fn inter_channel_layer_on(
    tape: &mut Tape,
    x: Var,
    prev: &[Var],
    p: &LayerVars,
    opts: AttentionOpts,
) -> Result<(Var, AttentionNodes)> {
    let att = multi_head_on(tape, x, prev, &p.attention, opts)?;
    if tape.value(att.z).shape() != tape.value(x).shape() {
        return Err(Error::contract(format!(
            "layer input is {:?} but attention output is {:?}; residual needs equal widths",
            tape.value(x).shape(),
            tape.value(att.z).shape()
        )));
    }
    let a = tape.add(x, att.z)?;
    let f = ffn_on(tape, a, &p.ffn)?;
    let y = tape.add(a, f)?;
    Ok((y, att))
}

/// Attention over channels followed by mean pooling; returns `(1 x E, nodes)`.
pub fn global_fusion_on(
    tape: &mut Tape,
    x: Var,
    prev: &[Var],
    p: &AttentionVars,
    opts: AttentionOpts,
) -> Result<(Var, AttentionNodes)> {
    if tape.value(x).rows() == 0 {
        return Err(Error::contract("global fusion over zero channels"));
    }
    let att = multi_head_on(tape, x, prev, p, opts)?;
    let fused = tape.mean_rows(att.z)?;
    Ok((fused, att))
}

// ---------------------------------------------------------------------------
// Plain forward pass

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub out: Matrix,
    pub scores: Matrix,
    pub weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub z: Matrix,
    pub state: AttentionState,
    pub weights: Vec<Matrix>,
}

fn state_vars<'a>(tape: &mut Tape<'a>, state: &'a AttentionState) -> Result<Vec<Var>> {
    state.validate()?;
    Ok(state.scores.iter().map(|s| tape.constant_ref(s)).collect())
}

fn collect(tape: &Tape, nodes: &AttentionNodes) -> AttentionOutput {
    AttentionOutput {
        z: tape.value(nodes.z).clone(),
        state: AttentionState {
            scores: nodes.scores.iter().map(|&s| tape.value(s).clone()).collect(),
        },
        weights: nodes.weights.iter().map(|&w| tape.value(w).clone()).collect(),
    }
}

pub fn attention_head(
    x: &Matrix,
    prev: &Matrix,
    p: &HeadParams,
    opts: AttentionOpts,
) -> Result<HeadOutput> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let pv = tape.constant_ref(prev);
    let hv = p.bind(&mut tape, false);
    let n = attention_head_on(&mut tape, xv, pv, &hv, opts)?;
    Ok(HeadOutput {
        out: tape.value(n.out).clone(),
        scores: tape.value(n.scores).clone(),
        weights: tape.value(n.weights).clone(),
    })
}

pub fn multi_head(
    x: &Matrix,
    state: &AttentionState,
    p: &AttentionParams,
    opts: AttentionOpts,
) -> Result<AttentionOutput> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let prev = state_vars(&mut tape, state)?;
    let av = p.bind(&mut tape, false);
    let nodes = multi_head_on(&mut tape, xv, &prev, &av, opts)?;
    Ok(collect(&tape, &nodes))
}

/// Returns the layer output and the attention it computed (whose `state`
/// feeds the next layer).
pub fn inter_channel_layer(
    x: &Matrix,
    state: &AttentionState,
    p: &LayerParams,
    opts: AttentionOpts,
) -> Result<(Matrix, AttentionOutput)> {
    p.attention.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let prev = state_vars(&mut tape, state)?;
    let lv = p.bind(&mut tape, false);
    let (y, nodes) = inter_channel_layer_on(&mut tape, xv, &prev, &lv, opts)?;
    Ok((tape.value(y).clone(), collect(&tape, &nodes)))
}

pub fn global_fusion(
    x: &Matrix,
    state: &AttentionState,
    p: &AttentionParams,
    opts: AttentionOpts,
) -> Result<(Matrix, AttentionOutput)> {
    p.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant_ref(x);
    let prev = state_vars(&mut tape, state)?;
    let av = p.bind(&mut tape, false);
    let (fused, nodes) = global_fusion_on(&mut tape, xv, &prev, &av, opts)?;
    Ok((tape.value(fused).clone(), collect(&tape, &nodes)))
}
