//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::Dimension { op: "set_param", lhs: current.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place updates; copies only if a tape still shares the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self) -> &[Arc<Tensor>] {
        &self.values
    }
}

/// Forward-pass context: a tape plus lazily bound parameter leaves.
pub struct Ctx<'t> {
    tape: &'t Tape,
    values: Vec<Arc<Tensor>>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let values = store.shared().to_vec();
        let bound = RefCell::new(vec![None; values.len()]);
        Self { tape, values, bound }
    }

    /// Binds each parameter to an existing leaf, e.g. one created by [`grad_check`].
    pub fn with_vars(tape: &'t Tape, vars: &[Var<'t>]) -> Self {
        let values = vars.iter().map(|v| v.value()).collect();
        Self { tape, values, bound: RefCell::new(vars.iter().copied().map(Some).collect()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.leaf_shared(self.values[id.0].clone()))
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .zip(&self.values)
            .map(|(var, value)| match var {
                Some(v) => grads.get(*v).unwrap_or_else(|| Tensor::zeros(value.shape())),
                None => Tensor::zeros(value.shape()),
            })
            .collect()
    }
}

/// Central-difference check of a scalar function of every tensor in `store`.
pub fn grad_check_store<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
{
    let inputs: Vec<Tensor> = store.values.iter().map(|v| (**v).clone()).collect();
    grad_check(|tape, vars| f(&Ctx::with_vars(tape, vars)), &inputs, opts)
}

/// Deterministic Glorot-uniform initializer.
///
/// Every tensor draws from its own ChaCha8 stream selected by a hash of its
/// name, so a parameter's initial value depends only on `(seed, name)` and not
/// on which other parameters exist.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        rng
    }

    /// `fan_in × fan_out` matrix drawn from U(−√(6/(fan_in+fan_out)), +√(…)).
    pub fn glorot(&self, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng(name);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("positive fan")
    }
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
