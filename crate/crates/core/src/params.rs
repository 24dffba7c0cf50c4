//! Named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{DiffTensor, Real, Tape};

/// Standard deviation of the normal initialisation used for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real = f32> {
    entries: BTreeMap<String, DiffTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: DiffTensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&DiffTensor<T>, ParamError> {
        self.entries.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffTensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(DiffTensor::len).sum()
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn on_tape(&self, tape: &Tape<T>) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), tape.leaf(v))).collect(),
        }
    }

    pub fn detached(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Same names, all-zero values.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), DiffTensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout<U: Real>(&self, other: &ParamSet<U>) -> Result<(), ParamError> {
        for (name, t) in &self.entries {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(ParamError::Missing(format!("{extra} (unexpected)")));
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.values()
                        .iter()
                        .zip(b.values())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Initialisers used by model constructors.
pub(crate) struct Init<'a> {
    pub(crate) rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub(crate) fn normal(&mut self, shape: &[usize], std: f64) -> DiffTensor<f32> {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32).collect();
        DiffTensor::new(shape, v).expect("init shape")
    }

    pub(crate) fn weight(&mut self, rows: usize, cols: usize) -> DiffTensor<f32> {
        self.normal(&[rows, cols], INIT_STD)
    }

    pub(crate) fn zeros(&mut self, shape: &[usize]) -> DiffTensor<f32> {
        DiffTensor::zeros(shape)
    }
}
