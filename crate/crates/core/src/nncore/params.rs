use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

/// Named parameter table. Registration order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.params.push(Parameter {
            grad: vec![0.0; value.numel()],
            value,
            requires_grad: true,
        });
        ParamId(id)
    }

    /// Normal(0, std) initialised `rows x cols` parameter.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::matrix(rows, cols, vec![v; rows * cols]).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (n, p) in self.names.iter().zip(&mut self.params) {
            if n.starts_with(prefix) {
                p.requires_grad = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the leaf gradients a tape accumulated for bound parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for &(id, var) in tape.param_bindings() {
            if let Some(g) = tape.grad(var) {
                for (d, s) in self.params[id.0].grad.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Rounds every value to the nearest 32-bit float, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
