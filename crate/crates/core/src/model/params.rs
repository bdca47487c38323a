use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which part of a network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Backbone resolution block, 1-based.
    Block(usize),
    JigsawHead,
    SegHead,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for weights followed by a rectifier.
    Kaiming { fan_in: usize },
    /// `N(0, 1 / fan_in)`, for the final linear map.
    Lecun { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics are state, not optimized parameters.
    pub trainable: bool,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        let std = match self.init {
            Init::Kaiming { fan_in } => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun { fan_in } => (1.0 / fan_in as f64).sqrt(),
            Init::Zeros => return Tensor::zeros(self.shape.clone()),
            Init::Ones => return Tensor::filled(self.shape.clone(), T::one()),
        };
        let data = (0..self.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(self.shape.clone(), data).expect("shape matches count")
    }
}

/// Named tensors: parameters, running statistics or gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Draws every spec in order from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(&spec.name, spec.sample(rng));
        }
        store
    }

    /// Panics if `name` is missing; stores are validated against their specs on construction.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.map.get(name).unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.map.insert(name.to_string(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `values` into the tensor `name`, creating it with `shape` if absent.
    pub fn accumulate(&mut self, name: &str, shape: &[usize], values: &[T]) {
        let t = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape.to_vec()));
        for (a, v) in t.data_mut().iter_mut().zip(values) {
            *a += *v;
        }
    }

    /// Checks names and shapes against `specs`; extra entries are errors too.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.map.get(&spec.name) {
                None => return Err(Error::Shape(format!("parameter `{}` missing", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.map.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(Error::Shape(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
