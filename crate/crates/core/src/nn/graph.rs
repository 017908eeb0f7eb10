//! Reverse-mode differentiation over a linear tape of 2-D operations.
//!
//! Every node holds a `rows × cols` value. Parameters enter the tape as
//! leaves tagged with the tree they belong to, so a single backward pass can
//! feed gradients into several [`ParamTree`]s (the joint teacher/decoder
//! update uses two).

use std::collections::HashMap;

use super::params::{ParamId, ParamTree};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A parameter tree bound to the tag used to route its gradients.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    pub tree: &'a ParamTree,
    pub tag: u8,
}

impl<'a> Params<'a> {
    pub fn new(tree: &'a ParamTree) -> Self {
        Self { tree, tag: 0 }
    }

    pub fn tagged(tree: &'a ParamTree, tag: u8) -> Self {
        Self { tree, tag }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(u8, ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(..) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Concat(..) => "concat",
            Op::ConcatRows(..) => "concat_rows",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "gather",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Pick(..) => "pick",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::Clamp(..) => "clamp",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    param_cache: HashMap<(u8, ParamId), Var>,
    non_finite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.grads.clear();
        self.param_cache.retain(|_, v| v.0 < mark);
        if matches!(self.non_finite, Some((i, _)) if i >= mark) {
            self.non_finite = None;
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).unwrap_or_else(|_| {
            // non-finite values are tracked separately by the graph
            let mut t = Tensor::zeros(&[n.rows, n.cols]);
            t.data_mut().copy_from_slice(&n.value);
            t
        })
    }

    /// Index and name of the first operation that produced NaN or ±∞.
    pub fn non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    /// Which side of its kink every element of every piecewise op
    /// (relu, min, max, clamp) took in the forward pass.
    pub fn branch_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.nodes[a.0].value.iter().map(|&x| u8::from(x > 0.0))),
                Op::Min(a, b) | Op::Max(a, b) => out.extend(
                    self.nodes[a.0]
                        .value
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(x, y)| u8::from(x <= y)),
                ),
                Op::Clamp(a, lo, hi) => out.extend(
                    self.nodes[a.0]
                        .value
                        .iter()
                        .map(|&x| u8::from(x >= *lo) + u8::from(x > *hi)),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((i, name)) => Err(Error::Training(format!(
                "non-finite value produced by `{name}` (node {i})"
            ))),
            None => Ok(()),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        if self.non_finite.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ---------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.constant(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Places parameter `id` of `p.tree` on the tape (once per tag and id).
    pub fn param(&mut self, p: Params<'_>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&(p.tag, id)) {
            return v;
        }
        let t = p.tree.value(id);
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param(p.tag, id), true);
        self.param_cache.insert((p.tag, id), v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(m, n, out, Op::MatMul(a, b), ng)
    }

    /// `x + b` with `b` a single row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row bias shape");
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(r, c, out, Op::AddRow(x, b), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "{} operand shapes", op.name());
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, f64::min, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, f64::max, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::Shift(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.shift(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.rows(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.rows(p), rows, "concat row counts");
                self.cols(p)
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * cols + off..r * cols + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, cols, out, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols && len > 0, "slice {start}+{len} of {cols}");
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(a);
        self.push(rows, len, out, Op::Slice(a, start), ng)
    }

    /// Row-wise stacking of nodes with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.cols(parts[0]);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.cols(p), cols, "concat_rows column counts");
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += self.rows(p);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= rows && len > 0, "row slice {start}+{len} of {rows}");
        let out = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        self.push(len, cols, out, Op::SliceRows(a, start), ng)
    }

    /// Same values, new `rows × cols` shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(rows * cols, self.nodes[a.0].value.len(), "reshape size");
        let out = self.nodes[a.0].value.clone();
        let ng = self.ng(a);
        self.push(rows, cols, out, Op::Reshape(a), ng)
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (n, cols) = self.shape(table);
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < n, "gather index {i} out of {n}");
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        self.push(idx.len(), cols, out, Op::Gather(table, idx.to_vec()), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ng = self.ng(a);
        self.push(rows, cols, out, Op::LogSoftmax(a), ng)
    }

    /// Element `idx[r]` of every row `r`, as an `rows × 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(idx.len(), rows, "pick needs one index per row");
        let src = &self.nodes[a.0].value;
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols, "pick column {c} of {cols}");
                src[r * cols + c]
            })
            .collect();
        let ng = self.ng(a);
        self.push(rows, 1, out, Op::Pick(a, idx.to_vec()), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let out = self.nodes[a.0].value.chunks(cols).map(|r| r.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(rows, 1, out, Op::RowSum(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the scalar `loss`. Fails if any recorded
    /// operation produced a non-finite value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_finite()?;
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(..)) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if !g.is_empty() && !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient reaching node {i} ({})",
                    self.nodes[i].op.name()
                )));
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    /// Adds the gradients of all parameters tagged `tag` into `tree`.
    pub fn accumulate(&self, tag: u8, tree: &mut ParamTree) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(t, id) = node.op {
                if t == tag {
                    if let Some(g) = self.grads.get(i).filter(|g| !g.is_empty()) {
                        tree.accumulate_grad(id, g);
                    }
                }
            }
        }
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.grads[v.0].is_empty() {
            self.grads[v.0] = vec![0.0; self.nodes[v.0].value.len()];
        }
        let mut buf = std::mem::take(&mut self.grads[v.0]);
        f(&mut buf, &self.nodes);
        self.grads[v.0] = buf;
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match op {
            Op::Leaf | Op::Param(..) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = cols;
                // dA = G · Bᵀ
                self.add_grad(a, |ga, nodes| {
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        &nodes[b.0].value,
                        (1, n as isize),
                        ga,
                        (k as isize, 1),
                        1.0,
                    );
                });
                // dB = Aᵀ · G
                self.add_grad(b, |gb, nodes| {
                    gemm(
                        k,
                        m,
                        n,
                        &nodes[a.0].value,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        gb,
                        (n as isize, 1),
                        1.0,
                    );
                });
            }
            Op::AddRow(x, b) => {
                self.add_grad(x, |gx, _| add_into(gx, g));
                self.add_grad(b, |gb, _| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_grad(a, |ga, _| add_into(ga, g));
                self.add_grad(b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.add_grad(a, |ga, _| add_into(ga, g));
                self.add_grad(b, |gb, _| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.add_grad(a, |ga, nodes| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *o += x * y;
                    }
                });
                self.add_grad(b, |gb, nodes| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *o += x * y;
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                // ties route the gradient to the first operand
                let pick_a: Vec<bool> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                self.add_grad(a, |ga, _| {
                    for ((o, x), &p) in ga.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *o += x;
                        }
                    }
                });
                self.add_grad(b, |gb, _| {
                    for ((o, x), &p) in gb.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *o += x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.add_grad(a, |ga, _| {
                for (o, x) in ga.iter_mut().zip(g) {
                    *o += x * s;
                }
            }),
            Op::Shift(a) => self.add_grad(a, |ga, _| add_into(ga, g)),
            Op::Sigmoid(a) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[i].value) {
                    *o += x * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[i].value) {
                    *o += x * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    if *y > 0.0 {
                        *o += x;
                    }
                }
            }),
            Op::Exp(a) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[i].value) {
                    *o += x * y;
                }
            }),
            Op::Square(a) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *o += 2.0 * x * y;
                }
            }),
            Op::Clamp(a, lo, hi) => self.add_grad(a, |ga, nodes| {
                for ((o, x), y) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    if *y >= lo && *y <= hi {
                        *o += x;
                    }
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.cols(p);
                    self.add_grad(p, |gp, _| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * cols + off..r * cols + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.add_grad(p, |gp, _| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                self.add_grad(a, |ga, _| add_into(&mut ga[start * cols..(start + rows) * cols], g));
            }
            Op::Reshape(a) => self.add_grad(a, |ga, _| add_into(ga, g)),
            Op::Slice(a, start) => {
                let src_cols = self.cols(a);
                self.add_grad(a, |ga, _| {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * src_cols + start..r * src_cols + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                });
            }
            Op::Gather(table, idx) => self.add_grad(table, |gt, _| {
                for (r, &t) in idx.iter().enumerate() {
                    add_into(&mut gt[t * cols..(t + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::LogSoftmax(a) => self.add_grad(a, |ga, nodes| {
                let y = &nodes[i].value;
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for ((o, gx), yx) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                        *o += gx - yx.exp() * s;
                    }
                }
            }),
            Op::Pick(a, idx) => {
                let src_cols = self.cols(a);
                self.add_grad(a, |ga, _| {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * src_cols + c] += g[r];
                    }
                });
            }
            Op::RowSum(a) => {
                let src_cols = self.cols(a);
                self.add_grad(a, |ga, _| {
                    for (r, row) in ga.chunks_mut(src_cols).enumerate() {
                        row.iter_mut().for_each(|o| *o += g[r]);
                    }
                });
            }
            Op::Sum(a) => self.add_grad(a, |ga, _| ga.iter_mut().for_each(|o| *o += g[0])),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// `C = A·B + beta·C` on strided row-major buffers; strides are (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
    sc: (isize, isize),
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: buffer lengths are checked above and every stride pattern used
    // in this module addresses at most m·k, k·n and m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}
