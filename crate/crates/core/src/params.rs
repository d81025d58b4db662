//! Named parameter storage and the forward-pass session that binds
//! parameters onto a tape.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried between passes (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
        }
    }

    /// Replaces every value from `(name, tensor)` pairs. Names and shapes
    /// must match this store exactly.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (param, (name, value)) in self.params.iter().zip(&values) {
            if &param.name != name {
                return Err(Error::ArchitectureMismatch(format!(
                    "expected parameter {:?}, found {name:?}",
                    param.name
                )));
            }
            let (want, got) = (param.value.shape().dims(), value.shape().dims());
            if let Some(axis) = (0..4).find(|&a| want[a] != got[a]) {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter {name}: axis {axis} has extent {} in the file, {} in the network",
                    got[axis], want[axis]
                )));
            }
        }
        for (param, (_, value)) in self.params.iter_mut().zip(values) {
            param.value = value;
        }
        Ok(())
    }
}

/// Fan-in scaled normal initialisation (He et al.).
pub fn normal<T: Real>(shape: Shape, std: f64, rng: &mut SplitMix64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.normal() * std))
}

/// Normal with std `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real>(shape: Shape, fan_in: usize, rng: &mut SplitMix64) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let bound = vec![None; store.len()];
        Self {
            tape: Tape::new(),
            store,
            mode,
            bound,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Tape variable for a parameter, recorded once per session. Buffers
    /// are recorded as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = match p.kind {
            ParamKind::Trainable => self.tape.leaf(p.value.clone()),
            ParamKind::Buffer => self.tape.constant(p.value.clone()),
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// `(parameter, tape variable)` for every parameter used so far.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}
