use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Storage precision of a parameter tree.
///
/// Arithmetic is always carried out in `f64`. With `F32` storage, values and
/// optimizer moments are rounded to the nearest `f32` after every optimizer
/// step, which makes checkpoints (written as `f32`) an exact image of the
/// in-memory state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// One learnable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named collection of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    step: u64,
    precision: Precision,
}

impl Default for ParamTree {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamTree {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
            precision: Precision::F32,
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::new()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        if precision == Precision::F32 {
            self.quantize();
        }
    }

    /// Adds a tensor. Names must be unique.
    pub fn insert(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = round_f32(*x);
            }
        }
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inserts a `rows × cols` tensor filled uniformly from `[-bound, bound]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.insert(name, Tensor::matrix(rows, cols, vec![v; rows * cols])?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        assert_eq!(p.grad.len(), grad.len(), "gradient length for {}", p.name);
        for (a, b) in p.grad.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies all tensors whose name starts with `prefix` into a new tree,
    /// keeping names, moments and the step counter.
    pub fn subtree(&self, prefix: &str) -> ParamTree {
        let mut out = ParamTree::with_precision(self.precision);
        out.step = self.step;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = ParamId(out.params.len());
            out.index.insert(p.name.clone(), id);
            out.params.push(p.clone());
        }
        out
    }

    /// Overwrites values of tensors present in `other` (matched by name).
    pub fn copy_values_from(&mut self, other: &ParamTree) -> Result<()> {
        for p in &other.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("parameter `{}`", p.name)));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    pub(crate) fn quantize(&mut self) {
        for p in &mut self.params {
            for x in p.value.data_mut() {
                *x = round_f32(*x);
            }
            for x in p.m.iter_mut().chain(p.v.iter_mut()) {
                *x = round_f32(*x);
            }
        }
    }

    pub(crate) fn push_raw(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::Load(format!("duplicate parameter `{}`", param.name)));
        }
        self.index.insert(param.name.clone(), ParamId(self.params.len()));
        self.params.push(param);
        Ok(())
    }
}

#[inline]
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut t = ParamTree::new();
        t.insert_const("a", 1, 1, 0.0).unwrap();
        assert!(t.insert_const("a", 1, 1, 0.0).is_err());
    }

    #[test]
    fn buffers_match_shape_and_moments_start_at_zero() {
        let mut t = ParamTree::new();
        let id = t.insert_const("w", 3, 4, 0.5).unwrap();
        let p = t.get(id);
        assert_eq!(p.grad.len(), 12);
        assert!(p.m.iter().chain(p.v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn subtree_keeps_prefix_only() {
        let mut t = ParamTree::new();
        t.insert_const("enc/w", 1, 1, 1.0).unwrap();
        t.insert_const("dec/w", 1, 1, 2.0).unwrap();
        let d = t.subtree("dec/");
        assert_eq!(d.len(), 1);
        assert_eq!(d.value(d.id("dec/w").unwrap()).data(), &[2.0]);
    }
}
