//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    KaimingUniform {
        fan_in: usize,
    },
    Uniform(f64),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Constant(c) => Tensor::full(shape.to_vec(), c),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
            }
            Init::Uniform(b) => Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-b..b)),
        }
    }
}

/// Ordered collection of named parameters.
///
/// Names are unique; insertion order is stable and defines iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let t = init.sample(shape, rng);
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a value keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "set() changes shape of {}", self.params[id.0].name);
        self.params[id.0].value = value;
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Binds a [`ParamStore`] onto a [`Tape`] for one forward pass.
///
/// Each parameter is recorded at most once, on first use.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t> Session<'t> {
    /// Parameters are recorded as differentiable leaves.
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { tape, store, bound: RefCell::new(vec![None; store.len()]), trainable: true }
    }

    /// Parameters are recorded as constants (inference).
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self { trainable: false, ..Self::new(tape, store) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.tape.var(value) } else { self.tape.constant(value) };
        bound[id.0] = Some(v);
        v
    }

    pub fn input(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradient for every parameter in store order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| match bound[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(self.store.get(id).shape().to_vec()),
            })
            .collect()
    }

    /// Whether the parameter was touched during the pass.
    pub fn used(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta = Init::KaimingUniform { fan_in: 9 }.sample(&[4, 4], &mut a);
        let tb = Init::KaimingUniform { fan_in: 9 }.sample(&[4, 4], &mut b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn session_binds_once_and_reports_grads() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new([2], vec![1.0, -1.0]));
        let unused = store.insert("u", Tensor::zeros([3]));
        let tape = Tape::new();
        let s = Session::new(&tape, &store);
        let a = s.param(w);
        let b = s.param(w);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).sum();
        let g = s.param_grads(&tape.backward(loss));
        assert_eq!(g[w.0].data(), &[2.0, -2.0]);
        assert_eq!(g[unused.0].data(), &[0.0; 3]);
        assert!(!s.used(unused));
    }
}
