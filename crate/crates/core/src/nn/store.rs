use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

/// Owns every named tensor of a model, in registration order.
///
/// Initial values come from a seeded generator so that two stores built with
/// the same seed and the same layer sequence are identical.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    entries: Mutex<Vec<ParamEntry>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            entries: Mutex::new(Vec::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        self.entries.lock().expect("param store poisoned").clone()
    }

    pub fn trainable(&self) -> Vec<ParamEntry> {
        self.entries().into_iter().filter(|e| e.kind == ParamKind::Trainable).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .lock()
            .expect("param store poisoned")
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.var.clone())
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|e| e.var.elem_count()).sum()
    }

    fn register(&self, name: String, shape: Shape, init: Init, kind: ParamKind) -> Result<Var> {
        let n = shape.elem_count();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("param rng poisoned");
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { std } => {
                    let d = Normal::new(0.0, std).map_err(|e| config_err!("init {name}: {e}"))?;
                    (0..n).map(|_| d.sample(&mut *rng)).collect()
                }
                Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut entries = self.entries.lock().expect("param store poisoned");
        if entries.iter().any(|e| e.name == name) {
            return Err(config_err!("parameter {name} registered twice"));
        }
        entries.push(ParamEntry { name, var: var.clone(), kind });
        Ok(var)
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        Scope { store: self.store, prefix: self.full(&name.to_string()) }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.register(self.full(name), shape.into(), init, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.register(self.full(name), shape.into(), init, ParamKind::Buffer)
    }
}
