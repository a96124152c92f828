use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`]. Layers hold ids, so two layers
/// built from the same id share the same parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: model shape {:?}, checkpoint shape {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Deterministic per-parameter RNG: the stream depends only on the model
/// seed and the parameter name, not on construction order.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(crate) fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("shape matches sample count")
}

/// Lazily records store parameters on a tape. Each parameter becomes one
/// leaf however many times it is used.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'t>>>>,
    tracked: bool,
}

impl<'t, 's> Binder<'t, 's> {
    /// Parameters become tracked leaves.
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            tracked: true,
        }
    }

    /// Parameters become constants; for inference.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Binder {
            tracked: false,
            ..Binder::new(tape, store)
        }
    }

    /// Uses `vars` (one per store parameter, in id order) instead of the
    /// stored values.
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vars for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        for (i, v) in vars.iter().enumerate() {
            if v.shape() != store.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind parameter",
                    lhs: v.shape(),
                    rhs: store.values[i].shape().to_vec(),
                });
            }
        }
        Ok(Binder {
            tape,
            store,
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
            tracked: true,
        })
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| {
            let v = self.store.get(id).clone();
            if self.tracked {
                self.tape.param(v)
            } else {
                self.tape.constant(v)
            }
        })
    }

    /// Every parameter used so far.
    pub fn bound(&self) -> Vec<(ParamId, Var<'t>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    /// Gradients of every used parameter, in id order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound()
            .into_iter()
            .map(|(id, v)| (id, grads.wrt(v)))
            .collect()
    }
}
