//! LSTM cells and the clause-feature assembly used by the hierarchical model.
//!
//! A word-level recurrence runs over per-token encoder states, clause spans
//! are summarized by mean pooling and fused with the clause's final word
//! hidden state under a weight `lambda`, and a sentence-level recurrence runs
//! over the resulting clause features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{glorot_uniform, NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

/// Iteration order for a recurrence over a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// What the sentence-level recurrence consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Clause features fused from span means and word-level hidden states.
    TokenSequence,
    /// The per-layer `[CLS]` states of the encoder, one feature per layer.
    ClsLadder,
}

/// Settings for combining clause summaries with word-level hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight on the word-level hidden state; the clause summary gets `1 - lambda`.
    pub lambda: f64,
    pub mode: FusionMode,
    pub word_direction: Direction,
    pub sentence_direction: Direction,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.5,
            mode: FusionMode::TokenSequence,
            word_direction: Direction::Forward,
            sentence_direction: Direction::Backward,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "fusion weight lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Parameter handles for one LSTM cell: four gates, each with input weights
/// (`hidden x input`), recurrent weights (`hidden x hidden`), and a bias.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub b_f: ParamId,
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub b_i: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub b_c: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub b_o: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Registers one LSTM cell's parameters under `prefix` and returns the
/// handles. Weight matrices start at Glorot-uniform values, biases at zero.
/// Registration order is fixed: for each gate in f, i, c, o order the input
/// weights, then the recurrent weights, then the bias.
pub fn init_lstm_cell(
    store: &mut ParamStore,
    prefix: &str,
    input_size: usize,
    hidden_size: usize,
    rng: &mut Rng,
) -> Result<LstmCellParams> {
    if input_size == 0 || hidden_size == 0 {
        return Err(Error::Config(format!(
            "LSTM cell sizes must be positive, got input {input_size}, hidden {hidden_size}"
        )));
    }
    let (n, k) = (input_size, hidden_size);
    let w = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut Rng| {
        store.add(&format!("{prefix}.{name}"), glorot_uniform(rng, rows, cols), true)
    };
    let b = |store: &mut ParamStore, name: &str| {
        store.add(&format!("{prefix}.{name}"), Tensor::zeros(vec![k]), true)
    };
    Ok(LstmCellParams {
        w_xf: w(store, "w_xf", k, n, rng)?,
        w_hf: w(store, "w_hf", k, k, rng)?,
        b_f: b(store, "b_f")?,
        w_xi: w(store, "w_xi", k, n, rng)?,
        w_hi: w(store, "w_hi", k, k, rng)?,
        b_i: b(store, "b_i")?,
        w_xc: w(store, "w_xc", k, n, rng)?,
        w_hc: w(store, "w_hc", k, k, rng)?,
        b_c: b(store, "b_c")?,
        w_xo: w(store, "w_xo", k, n, rng)?,
        w_ho: w(store, "w_ho", k, k, rng)?,
        b_o: b(store, "b_o")?,
        input_size: n,
        hidden_size: k,
    })
}

/// An LSTM cell whose parameters have been placed on a tape, so repeated
/// steps share the same nodes instead of copying the tensors per step.
#[derive(Debug, Clone)]
pub struct LoadedLstmCell {
    w_xf: NodeId,
    w_hf: NodeId,
    b_f: NodeId,
    w_xi: NodeId,
    w_hi: NodeId,
    b_i: NodeId,
    w_xc: NodeId,
    w_hc: NodeId,
    b_c: NodeId,
    w_xo: NodeId,
    w_ho: NodeId,
    b_o: NodeId,
    pub input_size: usize,
    pub hidden_size: usize,
}

/// Copies the cell's current parameter values onto the tape.
pub fn load_lstm_cell(tape: &mut Tape, store: &ParamStore, p: &LstmCellParams) -> LoadedLstmCell {
    LoadedLstmCell {
        w_xf: tape.param(store, p.w_xf),
        w_hf: tape.param(store, p.w_hf),
        b_f: tape.param(store, p.b_f),
        w_xi: tape.param(store, p.w_xi),
        w_hi: tape.param(store, p.w_hi),
        b_i: tape.param(store, p.b_i),
        w_xc: tape.param(store, p.w_xc),
        w_hc: tape.param(store, p.w_hc),
        b_c: tape.param(store, p.b_c),
        w_xo: tape.param(store, p.w_xo),
        w_ho: tape.param(store, p.w_ho),
        b_o: tape.param(store, p.b_o),
        input_size: p.input_size,
        hidden_size: p.hidden_size,
    }
}

/// Recurrent state: hidden vector `h` and memory cell `c`, both `hidden_size`
/// long. Every entry of `h` stays strictly inside (-1, 1) for finite inputs.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// The all-zero initial state.
pub fn zero_state(tape: &mut Tape, hidden_size: usize) -> LstmState {
    LstmState {
        h: tape.zeros(vec![hidden_size]),
        c: tape.zeros(vec![hidden_size]),
    }
}

fn gate_preact(
    tape: &mut Tape,
    w_x: NodeId,
    w_h: NodeId,
    bias: NodeId,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let from_input = tape.matvec(w_x, x)?;
    let from_hidden = tape.matvec(w_h, h)?;
    let sum = tape.add(from_input, from_hidden)?;
    tape.add(sum, bias)
}

/// One LSTM step. The forget and input gates mix the old memory with the
/// tanh candidate, and the output gate scales the tanh of the new memory:
/// `c' = f*c + i*cand`, `h' = o*tanh(c')`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    cell: &LoadedLstmCell,
    x: NodeId,
    state: LstmState,
) -> Result<LstmState> {
    if tape.shape(x) != [cell.input_size] {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell_step",
            lhs: vec![cell.hidden_size, cell.input_size],
            rhs: tape.shape(x).to_vec(),
        });
    }
    let f_pre = gate_preact(tape, cell.w_xf, cell.w_hf, cell.b_f, x, state.h)?;
    let f = tape.sigmoid(f_pre);
    let i_pre = gate_preact(tape, cell.w_xi, cell.w_hi, cell.b_i, x, state.h)?;
    let i = tape.sigmoid(i_pre);
    let c_pre = gate_preact(tape, cell.w_xc, cell.w_hc, cell.b_c, x, state.h)?;
    let cand = tape.tanh(c_pre);
    let o_pre = gate_preact(tape, cell.w_xo, cell.w_ho, cell.b_o, x, state.h)?;
    let o = tape.sigmoid(o_pre);

    let kept = tape.mul(f, state.c)?;
    let written = tape.mul(i, cand)?;
    let c_next = tape.add(kept, written)?;
    let c_tanh = tape.tanh(c_next);
    let h_next = tape.mul(o, c_tanh)?;
    Ok(LstmState { h: h_next, c: c_next })
}

fn run_lstm(
    tape: &mut Tape,
    cell: &LoadedLstmCell,
    inputs: &[NodeId],
    mask: &[bool],
    direction: Direction,
) -> Result<Vec<NodeId>> {
    if inputs.is_empty() {
        return Err(Error::Contract("LSTM run over an empty sequence".into()));
    }
    if inputs.len() != mask.len() {
        return Err(Error::Contract(format!(
            "LSTM mask length {} does not match sequence length {}",
            mask.len(),
            inputs.len()
        )));
    }
    let t = inputs.len();
    let mut outputs = vec![NodeId::default(); t];
    let mut state = zero_state(tape, cell.hidden_size);
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..t).collect(),
        Direction::Backward => (0..t).rev().collect(),
    };
    for pos in order {
        if mask[pos] {
            state = lstm_cell_step(tape, cell, inputs[pos], state)?;
            outputs[pos] = state.h;
        } else {
            outputs[pos] = tape.zeros(vec![cell.hidden_size]);
        }
    }
    Ok(outputs)
}

/// Runs the cell across per-token states in the given direction, starting
/// from the zero state. The result is aligned to input positions. Positions
/// with `mask` false are padding: they emit a zero vector and leave the
/// recurrent state untouched.
pub fn run_word_lstm(
    tape: &mut Tape,
    cell: &LoadedLstmCell,
    token_states: &[NodeId],
    mask: &[bool],
    direction: Direction,
) -> Result<Vec<NodeId>> {
    run_lstm(tape, cell, token_states, mask, direction)
}

/// Runs the cell across clause features (no padding at this level).
pub fn run_sentence_lstm(
    tape: &mut Tape,
    cell: &LoadedLstmCell,
    features: &[NodeId],
    direction: Direction,
) -> Result<Vec<NodeId>> {
    let mask = vec![true; features.len().max(1)];
    run_lstm(tape, cell, features, &mask[..features.len()], direction)
}

/// Summarizes a clause as the mean of its token states: rows
/// `span.0 .. span.1` of a `seq x width` matrix of per-token states.
pub fn clause_repr(tape: &mut Tape, token_states: NodeId, span: (usize, usize)) -> Result<NodeId> {
    if span.0 >= span.1 {
        return Err(Error::Contract(format!(
            "clause span ({}, {}) is empty",
            span.0, span.1
        )));
    }
    tape.mean_rows_range(token_states, span.0, span.1)
}

/// Fuses a clause summary with the clause's word-level hidden state:
/// the concatenation of `(1 - lambda) * summary` and `lambda * hidden`.
/// At the endpoints the scaled half is exactly zero.
pub fn clause_fuse(
    tape: &mut Tape,
    summary: NodeId,
    word_hidden: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!(
            "fusion weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let left = tape.scale(summary, 1.0 - lambda);
    let right = tape.scale(word_hidden, lambda);
    tape.concat_vec(&[left, right])
}

/// Builds the sentence-level input sequence from fused clause features.
///
/// With two or more clauses the fused features are used as-is. With exactly
/// one clause the sentence sees the word-level hidden state alone, zero-padded
/// on the left to the fused width (`pad_width` zeros, then the hidden state).
/// Zero clauses violate the contract; callers handle that case upstream.
pub fn assemble_sentence_features(
    tape: &mut Tape,
    fused: &[NodeId],
    word_hidden: NodeId,
    pad_width: usize,
) -> Result<Vec<NodeId>> {
    match fused.len() {
        0 => Err(Error::Contract(
            "sentence features require at least one clause".into(),
        )),
        1 => {
            let pad = tape.zeros(vec![pad_width]);
            let padded = tape.concat_vec(&[pad, word_hidden])?;
            Ok(vec![padded])
        }
        _ => Ok(fused.to_vec()),
    }
}
