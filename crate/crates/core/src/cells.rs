//! LSTM and GRU steps with optional per-row Hadamard modulation of the input
//! and recurrent paths, plus the modulated linear layer used by decoders.
//!
//! Gate weights are fused column blocks: LSTM `W: [in, 4h]`, `U: [h, 4h]`,
//! `b: [4h]` in gate order (i, f, g, o); GRU uses three blocks (z, r, n).
//! Scaling column `j` of `y·W` is the same as scaling column `j` of `W`, which
//! is the row of the per-gate matrix acting on output unit `j`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn has_cell_state(self) -> bool {
        matches!(self, CellKind::Lstm)
    }
}

/// Fused gate weights bound on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeights {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// Per-row gate modulation: `d_x`, `d_h` and `bias` are `[n, gates*h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateScales {
    pub d_x: Var,
    pub d_h: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

fn hidden_size(g: &Graph, kind: CellKind, w: &CellWeights) -> Result<usize> {
    let cols = *g.shape(w.w).last().unwrap_or(&0);
    if !cols.is_multiple_of(kind.gates()) || g.shape(w.u).last() != Some(&cols) {
        return Err(TensorError::ShapeMismatch {
            op: "cell_weights",
            left: g.shape(w.w).to_vec(),
            right: g.shape(w.u).to_vec(),
        });
    }
    Ok(cols / kind.gates())
}

/// `(x·W)`, `(h·U)` with optional Hadamard scaling.
fn paths(
    g: &mut Graph,
    y: Var,
    h: Var,
    w: &CellWeights,
    m: Option<&GateScales>,
) -> Result<(Var, Var)> {
    let mut a = g.matmul(y, w.w)?;
    let mut r = g.matmul(h, w.u)?;
    if let Some(m) = m {
        a = g.mul(m.d_x, a)?;
        r = g.mul(m.d_h, r)?;
    }
    Ok((a, r))
}

fn add_bias(g: &mut Graph, x: Var, b: Var, m: Option<&GateScales>) -> Result<Var> {
    let x = g.add_row(x, b)?;
    match m {
        Some(m) => g.add(x, m.bias),
        None => Ok(x),
    }
}

fn lstm(g: &mut Graph, y: Var, s: &CellState, w: &CellWeights, m: Option<&GateScales>) -> Result<CellState> {
    let h = hidden_size(g, CellKind::Lstm, w)?;
    let c = s.c.ok_or(TensorError::Invalid {
        op: "lstm_step",
        msg: "missing cell state".into(),
    })?;
    let (a, r) = paths(g, y, s.h, w, m)?;
    let pre = g.add(a, r)?;
    let pre = add_bias(g, pre, w.b, m)?;
    let i = g.slice(pre, 0, h)?;
    let i = g.sigmoid(i)?;
    let f = g.slice(pre, h, 2 * h)?;
    let f = g.sigmoid(f)?;
    let cand = g.slice(pre, 2 * h, 3 * h)?;
    let cand = g.tanh(cand)?;
    let o = g.slice(pre, 3 * h, 4 * h)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let tc = g.tanh(c_next)?;
    let h_next = g.mul(o, tc)?;
    Ok(CellState {
        h: h_next,
        c: Some(c_next),
    })
}

fn gru(g: &mut Graph, y: Var, s: &CellState, w: &CellWeights, m: Option<&GateScales>) -> Result<CellState> {
    let h = hidden_size(g, CellKind::Gru, w)?;
    let (a, r) = paths(g, y, s.h, w, m)?;
    let pa = add_bias(g, a, w.b, m)?;
    let az = g.slice(pa, 0, h)?;
    let rz = g.slice(r, 0, h)?;
    let z = g.add(az, rz)?;
    let z = g.sigmoid(z)?;
    let ar = g.slice(pa, h, 2 * h)?;
    let rr = g.slice(r, h, 2 * h)?;
    let reset = g.add(ar, rr)?;
    let reset = g.sigmoid(reset)?;
    let an = g.slice(pa, 2 * h, 3 * h)?;
    let rn = g.slice(r, 2 * h, 3 * h)?;
    let rn = g.mul(reset, rn)?;
    let n = g.add(an, rn)?;
    let n = g.tanh(n)?;
    // h' = (1 - z) n + z h = n + z (h - n)
    let diff = g.sub(s.h, n)?;
    let zd = g.mul(z, diff)?;
    let h_next = g.add(n, zd)?;
    Ok(CellState { h: h_next, c: None })
}

pub fn lstm_step(g: &mut Graph, y: Var, s: &CellState, w: &CellWeights) -> Result<CellState> {
    lstm(g, y, s, w, None)
}

pub fn hyper_lstm_step(
    g: &mut Graph,
    y: Var,
    s: &CellState,
    w: &CellWeights,
    m: &GateScales,
) -> Result<CellState> {
    lstm(g, y, s, w, Some(m))
}

pub fn gru_step(g: &mut Graph, y: Var, s: &CellState, w: &CellWeights) -> Result<CellState> {
    gru(g, y, s, w, None)
}

pub fn hyper_gru_step(
    g: &mut Graph,
    y: Var,
    s: &CellState,
    w: &CellWeights,
    m: &GateScales,
) -> Result<CellState> {
    gru(g, y, s, w, Some(m))
}

pub fn cell_step(
    g: &mut Graph,
    kind: CellKind,
    y: Var,
    s: &CellState,
    w: &CellWeights,
    m: Option<&GateScales>,
) -> Result<CellState> {
    match kind {
        CellKind::Lstm => lstm(g, y, s, w, m),
        CellKind::Gru => gru(g, y, s, w, m),
    }
}

/// `d ∘ (x·W) + b + δ`, with `d` and `δ` given per row.
pub fn hyper_linear(g: &mut Graph, x: Var, w: Var, b: Var, d: Var, delta: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let scaled = g.mul(d, xw)?;
    let out = g.add_row(scaled, b)?;
    g.add(out, delta)
}
