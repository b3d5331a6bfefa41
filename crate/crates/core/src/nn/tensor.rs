//! Scalar trait, named parameter sets and tensor helpers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use indexmap::IndexMap;
use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating point types the substrate runs on. Training uses `f32`; `f64`
/// exists for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Draws one standard normal variate. Always sampled at 64-bit and then cast
/// so that 32- and 64-bit runs consume the generator identically.
pub fn standard_normal<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    let x: f64 = rng.sample(StandardNormal);
    F::of(x)
}

pub fn normal_matrix<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || standard_normal(rng))
}

pub fn all_finite<F: Real>(a: &Array2<F>) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Ordered collection of named 2-D tensors. Biases are stored as `1 x n`
/// rows and scalars as `1 x 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F: Real> {
    tensors: IndexMap<String, Array2<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Names starting with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |n| n.starts_with(prefix))
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Copies every tensor of `other` into `self` under the same name.
    pub fn extend_from(&mut self, other: &ParamSet<F>) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Sub-set of tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

impl<F: Real> FromIterator<(String, Array2<F>)> for ParamSet<F> {
    fn from_iter<T: IntoIterator<Item = (String, Array2<F>)>>(iter: T) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}
