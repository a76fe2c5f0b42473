use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::arch::{Init, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every parameter from its init rule. A single ChaCha stream is
    /// consumed in name order, so the result only depends on `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut tensors = BTreeMap::new();
        for spec in sorted {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Conv { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-bound..bound)))
                }
                Init::Unit => Tensor::from_fn(&spec.shape, |_| T::of(rng.random_range(-1.0..=1.0))),
                Init::Identity => {
                    let (c, k) = (spec.shape[1], spec.shape[2]);
                    Tensor::from_fn(&spec.shape, |i| {
                        let (co, rest) = (i / (c * k), i % (c * k));
                        if co == rest / k && rest % k == k - 1 {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                }
            };
            tensors.insert(spec.name.clone(), t);
        }
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{} is {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        if self.len() != specs.len() {
            let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self.names().find(|n| !known.contains(n)).unwrap_or("?");
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Puts every parameter on the tape: as a leaf when `trainable(name)`,
    /// otherwise as a constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over the names and little-endian `f32` bytes of every
    /// parameter whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update([0]);
            for v in t.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
