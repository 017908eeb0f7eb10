//! Minimal reverse-mode differentiable numeric core.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, Coverage, GradCheckReport};
pub use graph::{sigmoid, Graph, Params, Var};
pub use layers::{CellKind, CellState, Dense, Embedding, Highway, Recurrent, RecurrentCell, RecurrentOutput};
pub use optim::{adam_next, adam_step, clip_global_norm, AdamConfig};
pub use params::{Param, ParamId, ParamTree, Precision};
pub use tensor::Tensor;

/// Row-wise softmax of a flat `rows × cols` buffer.
pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
