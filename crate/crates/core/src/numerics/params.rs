use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a parameter belongs to. Used for freezing and
/// for detaching the reconstruction decoders during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Reconstruction,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Matrix>,
}

/// Named learnable matrices. Values sit behind `Arc` so that tapes can hold
/// them without copying; the optimizer writes through copy-on-write.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers a parameter, or returns the existing one if the name is
    /// taken and the shape matches.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Matrix,
    ) -> Result<ParamId> {
        let name = name.into();
        if let Some(&id) = self.by_name.get(&name) {
            let existing = self.params[id.0].value.shape();
            if existing != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {existing:?}, expected {:?}",
                    value.shape()
                )));
            }
            return Ok(id);
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value: Arc::new(value),
        });
        Ok(id)
    }

    /// Registers a `rows x cols` parameter drawn from U(-bound, bound).
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if let Some(&id) = self.by_name.get(&name) {
            return self.insert(name, group, Matrix::zeros(rows, cols)).map(|_| id);
        }
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, group, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn arc(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    /// Mutable access; clones the matrix first if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let current = self.params[id.0].value.shape();
        if current != value.shape() {
            return Err(Error::Shape {
                op: "param set",
                left: current,
                right: value.shape(),
            });
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
