//! Layers built on the tape: dense, embedding, highway and recurrent cells.
//!
//! Initialization: dense weights are Glorot-uniform, recurrent weights are
//! uniform in ±0.1, biases start at zero except the LSTM forget gate (+1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Params, Var};
use super::params::{ParamId, ParamTree};
use crate::error::{Error, Result};

pub const RECURRENT_INIT: f64 = 0.1;

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x·W + b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Config(format!("dense layer `{name}` with zero width")));
        }
        let w = tree.insert_uniform(&format!("{name}/w"), fan_in, fan_out, glorot(fan_in, fan_out), rng)?;
        let b = tree.insert_const(&format!("{name}/b"), 1, fan_out, 0.0)?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Re-binds a layer to tensors already present in `tree`.
    pub fn bind(tree: &ParamTree, name: &str) -> Result<Self> {
        let w = lookup(tree, &format!("{name}/w"))?;
        let b = lookup(tree, &format!("{name}/b"))?;
        let shape = tree.value(w).shape();
        Ok(Self {
            w,
            b,
            fan_in: shape[0],
            fan_out: shape[1],
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, x: Var) -> Result<Var> {
        if g.cols(x) != self.fan_in {
            return Err(Error::Shape(format!(
                "dense input has {} columns, layer expects {}",
                g.cols(x),
                self.fan_in
            )));
        }
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }
}

pub(crate) fn lookup(tree: &ParamTree, name: &str) -> Result<ParamId> {
    tree.id(name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Lookup table of `vocab × dim` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = tree.insert_uniform(&format!("{name}/table"), vocab, dim, glorot(vocab, dim), rng)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn bind(tree: &ParamTree, name: &str) -> Result<Self> {
        let table = lookup(tree, &format!("{name}/table"))?;
        let shape = tree.value(table).shape();
        Ok(Self {
            table,
            vocab: shape[0],
            dim: shape[1],
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let t = g.param(p, self.table);
        Ok(g.gather_rows(t, ids))
    }
}

/// Two-layer-style gated block: `t ⊙ relu(G x) + (1 − t) ⊙ Q x`, with
/// `t = σ(T x)` and `G`, `Q`, `T` affine maps of equal width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Highway {
    gate: Dense,
    transform: Dense,
    carry: Dense,
}

impl Highway {
    pub fn new<R: Rng + ?Sized>(tree: &mut ParamTree, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gate: Dense::new(tree, &format!("{name}/gate"), dim, dim, rng)?,
            transform: Dense::new(tree, &format!("{name}/g"), dim, dim, rng)?,
            carry: Dense::new(tree, &format!("{name}/q"), dim, dim, rng)?,
        })
    }

    pub fn bind(tree: &ParamTree, name: &str) -> Result<Self> {
        Ok(Self {
            gate: Dense::bind(tree, &format!("{name}/gate"))?,
            transform: Dense::bind(tree, &format!("{name}/g"))?,
            carry: Dense::bind(tree, &format!("{name}/q"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, x: Var) -> Result<Var> {
        let t_pre = self.gate.forward(g, p, x)?;
        let t = g.sigmoid(t_pre);
        let gx = self.transform.forward(g, p, x)?;
        let f = g.relu(gx);
        let q = self.carry.forward(g, p, x)?;
        let on = g.mul(t, f);
        let keep = g.one_minus(t);
        let off = g.mul(keep, q);
        Ok(g.add(on, off))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Gru,
}

/// Hidden (and, for LSTM, cell) state of a recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

/// A single LSTM or GRU cell.
///
/// LSTM gates are laid out `[input, forget, candidate, output]` in the
/// columns of one `(in + hidden) × 4·hidden` matrix. GRU uses a
/// `(in + hidden) × 2·hidden` matrix for `[reset, update]` and separate
/// input/hidden projections for the candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    w: ParamId,
    b: ParamId,
    // GRU candidate projections
    wx_n: Option<ParamId>,
    wh_n: Option<ParamId>,
    b_n: Option<ParamId>,
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config(format!("recurrent cell `{name}` with zero width")));
        }
        let r = RECURRENT_INIT;
        match kind {
            CellKind::Lstm => {
                let w = tree.insert_uniform(&format!("{name}/w"), input + hidden, 4 * hidden, r, rng)?;
                let mut bias = vec![0.0; 4 * hidden];
                bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
                let b = tree.insert(&format!("{name}/b"), super::Tensor::matrix(1, 4 * hidden, bias)?)?;
                Ok(Self {
                    kind,
                    input,
                    hidden,
                    w,
                    b,
                    wx_n: None,
                    wh_n: None,
                    b_n: None,
                })
            }
            CellKind::Gru => {
                let w = tree.insert_uniform(&format!("{name}/w"), input + hidden, 2 * hidden, r, rng)?;
                let b = tree.insert_const(&format!("{name}/b"), 1, 2 * hidden, 0.0)?;
                let wx_n = tree.insert_uniform(&format!("{name}/wx_n"), input, hidden, r, rng)?;
                let wh_n = tree.insert_uniform(&format!("{name}/wh_n"), hidden, hidden, r, rng)?;
                let b_n = tree.insert_const(&format!("{name}/b_n"), 1, hidden, 0.0)?;
                Ok(Self {
                    kind,
                    input,
                    hidden,
                    w,
                    b,
                    wx_n: Some(wx_n),
                    wh_n: Some(wh_n),
                    b_n: Some(b_n),
                })
            }
        }
    }

    pub fn bind(tree: &ParamTree, name: &str) -> Result<Self> {
        let w = lookup(tree, &format!("{name}/w"))?;
        let b = lookup(tree, &format!("{name}/b"))?;
        let shape = tree.value(w).shape().to_vec();
        if let Some(wx_n) = tree.id(&format!("{name}/wx_n")) {
            let hidden = shape[1] / 2;
            Ok(Self {
                kind: CellKind::Gru,
                input: shape[0] - hidden,
                hidden,
                w,
                b,
                wx_n: Some(wx_n),
                wh_n: Some(lookup(tree, &format!("{name}/wh_n"))?),
                b_n: Some(lookup(tree, &format!("{name}/b_n"))?),
            })
        } else {
            let hidden = shape[1] / 4;
            Ok(Self {
                kind: CellKind::Lstm,
                input: shape[0] - hidden,
                hidden,
                w,
                b,
                wx_n: None,
                wh_n: None,
                b_n: None,
            })
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        let h = g.zeros(batch, self.hidden);
        let c = match self.kind {
            CellKind::Lstm => Some(g.zeros(batch, self.hidden)),
            CellKind::Gru => None,
        };
        CellState { h, c }
    }

    /// One application of the cell.
    pub fn step(&self, g: &mut Graph, p: Params<'_>, x: Var, state: CellState) -> Result<CellState> {
        if g.cols(x) != self.input {
            return Err(Error::Shape(format!(
                "recurrent input has {} columns, cell expects {}",
                g.cols(x),
                self.input
            )));
        }
        let hdim = self.hidden;
        let xh = g.concat(&[x, state.h]);
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let pre = g.matmul(xh, w);
        let pre = g.add_row(pre, b);
        match self.kind {
            CellKind::Lstm => {
                let c_prev = state
                    .c
                    .ok_or_else(|| Error::Config("LSTM step without cell state".into()))?;
                let i = g.slice_cols(pre, 0, hdim);
                let i = g.sigmoid(i);
                let f = g.slice_cols(pre, hdim, hdim);
                let f = g.sigmoid(f);
                let c_hat = g.slice_cols(pre, 2 * hdim, hdim);
                let c_hat = g.tanh(c_hat);
                let o = g.slice_cols(pre, 3 * hdim, hdim);
                let o = g.sigmoid(o);
                let keep = g.mul(f, c_prev);
                let write = g.mul(i, c_hat);
                let c = g.add(keep, write);
                let tc = g.tanh(c);
                let h = g.mul(o, tc);
                Ok(CellState { h, c: Some(c) })
            }
            CellKind::Gru => {
                let r = g.slice_cols(pre, 0, hdim);
                let r = g.sigmoid(r);
                let u = g.slice_cols(pre, hdim, hdim);
                let u = g.sigmoid(u);
                let wx = g.param(p, self.wx_n.expect("gru"));
                let wh = g.param(p, self.wh_n.expect("gru"));
                let bn = g.param(p, self.b_n.expect("gru"));
                let xn = g.matmul(x, wx);
                let xn = g.add_row(xn, bn);
                let hn = g.matmul(state.h, wh);
                let rh = g.mul(r, hn);
                let n = g.add(xn, rh);
                let n = g.tanh(n);
                let keep = g.mul(u, state.h);
                let one_minus_u = g.one_minus(u);
                let write = g.mul(one_minus_u, n);
                let h = g.add(keep, write);
                Ok(CellState { h, c: None })
            }
        }
    }
}

/// Output of [`Recurrent::forward`].
#[derive(Clone, Debug)]
pub struct RecurrentOutput {
    /// Hidden state at each position (`batch × hidden`, or `2·hidden` when
    /// bidirectional, forward half first).
    pub steps: Vec<Var>,
    /// Final forward state, concatenated with the backward direction's state
    /// after it has consumed position 0.
    pub last: Var,
}

/// Uni- or bidirectional single-layer recurrent encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recurrent {
    pub fwd: RecurrentCell,
    pub bwd: Option<RecurrentCell>,
}

impl Recurrent {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fwd = RecurrentCell::new(tree, &format!("{name}/fwd"), kind, input, hidden, rng)?;
        let bwd = if bidirectional {
            Some(RecurrentCell::new(
                tree,
                &format!("{name}/bwd"),
                kind,
                input,
                hidden,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { fwd, bwd })
    }

    pub fn bind(tree: &ParamTree, name: &str) -> Result<Self> {
        let fwd = RecurrentCell::bind(tree, &format!("{name}/fwd"))?;
        let bwd = if tree.id(&format!("{name}/bwd/w")).is_some() {
            Some(RecurrentCell::bind(tree, &format!("{name}/bwd"))?)
        } else {
            None
        };
        Ok(Self { fwd, bwd })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden * if self.bwd.is_some() { 2 } else { 1 }
    }

    pub fn forward(&self, g: &mut Graph, p: Params<'_>, inputs: &[Var]) -> Result<RecurrentOutput> {
        if inputs.is_empty() {
            return Err(Error::Input("recurrent forward over an empty sequence".into()));
        }
        let batch = g.rows(inputs[0]);
        let mut state = self.fwd.zero_state(g, batch);
        let mut fwd_h = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.fwd.step(g, p, x, state)?;
            fwd_h.push(state.h);
        }
        let Some(bwd) = &self.bwd else {
            let last = *fwd_h.last().expect("nonempty");
            return Ok(RecurrentOutput { steps: fwd_h, last });
        };
        let mut state_b = bwd.zero_state(g, batch);
        let mut bwd_h = vec![fwd_h[0]; inputs.len()];
        for (t, &x) in inputs.iter().enumerate().rev() {
            state_b = bwd.step(g, p, x, state_b)?;
            bwd_h[t] = state_b.h;
        }
        let steps = fwd_h.iter().zip(&bwd_h).map(|(&f, &b)| g.concat(&[f, b])).collect();
        let last = g.concat(&[*fwd_h.last().expect("nonempty"), bwd_h[0]]);
        Ok(RecurrentOutput { steps, last })
    }
}
