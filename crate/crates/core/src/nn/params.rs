use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
}

/// Named parameter blocks packed into one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub values: Vec<T>,
    pub specs: Vec<ParamSpec>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { values: Vec::new(), specs: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    /// Registers a block. With `rng = None` the block is zero-filled, which is
    /// how layouts are rebuilt before loading stored values.
    pub fn add<R: Rng>(&mut self, name: String, shape: &[usize], init: Init, rng: Option<&mut R>) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match (init, rng) {
            (Init::Uniform(bound), Some(rng)) => {
                self.values.extend((0..len).map(|_| T::of(rng.gen_range(-bound..=bound))))
            }
            (Init::Ones, _) => self.values.extend(core::iter::repeat(T::one()).take(len)),
            _ => self.values.extend(core::iter::repeat(T::zero()).take(len)),
        }
        self.specs.push(ParamSpec { name, offset, shape: shape.to_vec() });
        ParamId(self.specs.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let s = &self.specs[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.values[a..b]
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { values: self.values.iter().map(|v| U::of(v.f64())).collect(), specs: self.specs.clone() }
    }

    /// Replaces all values, checking that the stored layout matches.
    pub fn load(&mut self, specs: &[ParamSpec], values: Vec<T>) -> Result<()> {
        if specs != self.specs.as_slice() || values.len() != self.values.len() {
            return Err(Error::InvalidConfig("stored parameter layout does not match the model config".into()));
        }
        self.values = values;
        Ok(())
    }
}
