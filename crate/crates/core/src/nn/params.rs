//! Flat parameter storage with named, shaped views.

use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Every trainable tensor of a model, contiguous in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut Rng) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.data.extend(std::iter::repeat_n(1.0, len)),
            Init::Normal(std) => self.data.extend((0..len).map(|_| std * rng.normal())),
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(vec![0.0; self.data.len()])
    }

    /// Overwrite all values; the layout must match.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "parameter count {} vs {}",
                values.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }
}

/// Gradient buffer laid out exactly like the [`ParamStore`] it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<f64>);

impl Grads {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> &[f64] {
        let e = store.entry(id);
        &self.0[e.offset..e.offset + e.len]
    }

    pub fn get_mut(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        let e = store.entry(id);
        &mut self.0[e.offset..e.offset + e.len]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a [f64]> {
        store.find(name).map(|id| self.get(store, id))
    }

    pub fn flat(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            *g *= s;
        }
    }
}
