//! Named parameter storage and per-graph binding.
//!
//! Parameters live outside any tape as plain buffers. Each forward pass
//! binds them onto a fresh [`Tape`] as `param` leaves; after `backward`,
//! gradients are read back by name.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>, shape: Vec<usize>) {
        assert_eq!(numel(&shape), data.len());
        self.entries.insert(name.into(), ParamEntry { data, shape });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }
}

/// Deterministic N(0, std) initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64, std: f64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dist: Normal::new(0.0, std).expect("valid std"),
        }
    }

    pub fn normal(&mut self, shape: &[usize]) -> Vec<f64> {
        (0..numel(shape)).map(|_| self.dist.sample(&mut self.rng)).collect()
    }
}

/// Binds store parameters onto one tape, caching by name.
pub struct Binder<'a> {
    tape: Tape,
    store: &'a ParamStore,
    pub bound: IndexMap<String, Tensor>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape: tape.clone(),
            store,
            bound: IndexMap::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn bind(&mut self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.get(name) {
            return Ok(t.clone());
        }
        let entry = self.store.get(name)?;
        let t = self.tape.param(entry.data.clone(), entry.shape.clone());
        self.bound.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every bound parameter that backward reached.
    /// Unreached parameters are reported as absent.
    pub fn grads(&self) -> IndexMap<String, Vec<f64>> {
        let mut out = IndexMap::new();
        for (name, tensor) in &self.bound {
            if let Some(g) = tensor.grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
