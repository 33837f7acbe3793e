use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, ParamBuilder};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

/// Recurrent batch-normalization variant for GRU cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentBn {
    Off,
    /// Separate normalization of the input and recurrent pre-activations,
    /// one running accumulator per normalization shared over time steps.
    PreActivation,
}

#[derive(Clone, Debug)]
struct GruNorms {
    input: BatchNorm,
    hidden: BatchNorm,
    candidate: BatchNorm,
}

/// Gated recurrent unit:
/// `z, r = σ(x Wx + h Uzr + b)`, `c = tanh(x Wc + (r ⊙ h) Uc + bc)`,
/// `h' = h + z ⊙ (c − h)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    w_x: ParamId,
    u_zr: ParamId,
    u_c: ParamId,
    bias: ParamId,
    norms: Option<GruNorms>,
}

impl GruCell {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        input_size: usize,
        hidden_size: usize,
        bn: RecurrentBn,
    ) -> Self {
        let h = hidden_size;
        let w_x = b.glorot(&format!("{local}.w_x"), &[input_size, 3 * h], input_size, h);
        let u_zr = b.glorot(&format!("{local}.u_zr"), &[h, 2 * h], h, h);
        let u_c = b.glorot(&format!("{local}.u_c"), &[h, h], h, h);
        let bias = b.filled(&format!("{local}.bias"), &[3 * h], 0.0);
        let norms = match bn {
            RecurrentBn::Off => None,
            RecurrentBn::PreActivation => Some(GruNorms {
                input: BatchNorm::new(b, &format!("{local}.bn_x"), 3 * h, 0.1, false),
                hidden: BatchNorm::new(b, &format!("{local}.bn_h"), 2 * h, 0.1, false),
                candidate: BatchNorm::new(b, &format!("{local}.bn_c"), h, 0.1, false),
            }),
        };
        Self {
            input_size,
            hidden_size,
            w_x,
            u_zr,
            u_c,
            bias,
            norms,
        }
    }

    fn norm(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        which: fn(&GruNorms) -> &BatchNorm,
        x: Var,
    ) -> Result<Var> {
        match &self.norms {
            Some(n) => which(n).forward(g, store, x),
            None => Ok(x),
        }
    }

    /// One step. `h = None` is the zero initial state; its recurrent terms are
    /// skipped since they vanish identically.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        h: Option<Var>,
    ) -> Result<Var> {
        let hs = self.hidden_size;
        let wx = g.param(store, self.w_x);
        let xw = g.matmul(x, wx);
        let xw = self.norm(g, store, |n| &n.input, xw)?;
        let bias = g.param(store, self.bias);
        let pre = g.add_bias(xw, bias);
        let pre_zr = g.slice(pre, 1, 0, 2 * hs);
        let pre_c = g.slice(pre, 1, 2 * hs, hs);
        match h {
            None => {
                let z_pre = g.slice(pre_zr, 1, 0, hs);
                let z = g.sigmoid(z_pre);
                let c = g.tanh(pre_c);
                Ok(g.mul(z, c))
            }
            Some(h) => {
                let uzr = g.param(store, self.u_zr);
                let hu = g.matmul(h, uzr);
                let hu = self.norm(g, store, |n| &n.hidden, hu)?;
                let zr_pre = g.add(pre_zr, hu);
                let zr = g.sigmoid(zr_pre);
                let z = g.slice(zr, 1, 0, hs);
                let r = g.slice(zr, 1, hs, hs);
                let rh = g.mul(r, h);
                let uc = g.param(store, self.u_c);
                let cu = g.matmul(rh, uc);
                let cu = self.norm(g, store, |n| &n.candidate, cu)?;
                let c_pre = g.add(pre_c, cu);
                let c = g.tanh(c_pre);
                let diff = g.sub(c, h);
                let upd = g.mul(z, diff);
                Ok(g.add(h, upd))
            }
        }
    }
}

/// Long short-term memory cell with gate order (i, f, g, o); the forget-gate
/// bias starts at 1.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    w_x: ParamId,
    u: ParamId,
    bias: ParamId,
}

impl LstmCell {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        input_size: usize,
        hidden_size: usize,
    ) -> Self {
        let h = hidden_size;
        let w_x = b.glorot(&format!("{local}.w_x"), &[input_size, 4 * h], input_size, h);
        let u = b.glorot(&format!("{local}.u"), &[h, 4 * h], h, h);
        let mut init = alloc::vec![0.0; 4 * h];
        init[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        let bias = b.values(&format!("{local}.bias"), &[4 * h], init);
        Self {
            input_size,
            hidden_size,
            w_x,
            u,
            bias,
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let hs = self.hidden_size;
        let wx = g.param(store, self.w_x);
        let mut pre = g.matmul(x, wx);
        if let Some((h, _)) = state {
            let u = g.param(store, self.u);
            let hu = g.matmul(h, u);
            pre = g.add(pre, hu);
        }
        let bias = g.param(store, self.bias);
        let pre = g.add_bias(pre, bias);
        let gate = |g: &mut Graph, k: usize| g.slice(pre, 1, k * hs, hs);
        let (i, f, c_hat, o) = (gate(g, 0), gate(g, 1), gate(g, 2), gate(g, 3));
        let i = g.sigmoid(i);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);
        let mut c = g.mul(i, c_hat);
        if let Some((_, c_prev)) = state {
            let f = g.sigmoid(f);
            let keep = g.mul(f, c_prev);
            c = g.add(keep, c);
        }
        let tc = g.tanh(c);
        Ok((g.mul(o, tc), c))
    }
}

#[derive(Clone, Debug)]
pub enum RnnCell {
    Gru(GruCell),
    Lstm(LstmCell),
}

/// Hidden state carried between steps; `cell` is only used by LSTM.
#[derive(Clone, Copy, Debug)]
pub struct RnnState {
    pub hidden: Var,
    pub cell: Option<Var>,
}

impl RnnCell {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        kind: CellKind,
        input_size: usize,
        hidden_size: usize,
        bn: RecurrentBn,
    ) -> Self {
        match kind {
            CellKind::Gru => RnnCell::Gru(GruCell::new(b, local, input_size, hidden_size, bn)),
            CellKind::Lstm => RnnCell::Lstm(LstmCell::new(b, local, input_size, hidden_size)),
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            RnnCell::Gru(c) => c.input_size,
            RnnCell::Lstm(c) => c.input_size,
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            RnnCell::Gru(c) => c.hidden_size,
            RnnCell::Lstm(c) => c.hidden_size,
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        state: Option<RnnState>,
    ) -> Result<RnnState> {
        match self {
            RnnCell::Gru(c) => Ok(RnnState {
                hidden: c.step(g, store, x, state.map(|s| s.hidden))?,
                cell: None,
            }),
            RnnCell::Lstm(c) => {
                let prev = state.map(|s| (s.hidden, s.cell.expect("LSTM state carries a cell")));
                let (h, cell) = c.step(g, store, x, prev)?;
                Ok(RnnState {
                    hidden: h,
                    cell: Some(cell),
                })
            }
        }
    }

    /// Runs the cell over `xs` in the given order from a zero state.
    fn run(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xs: impl Iterator<Item = Var>,
    ) -> Result<Vec<Var>> {
        let mut state: Option<RnnState> = None;
        let mut out = Vec::new();
        for x in xs {
            let s = self.step(g, store, x, state)?;
            out.push(s.hidden);
            state = Some(s);
        }
        Ok(out)
    }
}

/// Forward and backward recurrences over the same input sequence.
#[derive(Clone, Debug)]
pub struct BiRnn {
    pub forward: RnnCell,
    pub backward: RnnCell,
}

impl BiRnn {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        kind: CellKind,
        input_size: usize,
        hidden_size: usize,
        bn: RecurrentBn,
    ) -> Self {
        Self {
            forward: RnnCell::new(
                b,
                &format!("{local}.fwd"),
                kind,
                input_size,
                hidden_size,
                bn,
            ),
            backward: RnnCell::new(
                b,
                &format!("{local}.bwd"),
                kind,
                input_size,
                hidden_size,
                bn,
            ),
        }
    }

    /// Returns `(H_f, H_b)` where `H_f[l]` has seen `x_1..x_l` and `H_b[l]`
    /// has seen `x_l..x_L`; both are indexed by position.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xs: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if xs.is_empty() {
            return Err(Error::Empty(
                "bidirectional RNN over an empty sequence".into(),
            ));
        }
        let hf = self.forward.run(g, store, xs.iter().copied())?;
        let mut hb = self.backward.run(g, store, xs.iter().rev().copied())?;
        hb.reverse();
        Ok((hf, hb))
    }
}
