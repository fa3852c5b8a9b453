use std::collections::BTreeMap;

use rand::Rng;

use super::{numel, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    KaimingUniform { fan_in: usize },
    Constant(f64),
}

/// Name, shape and initialiser of one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    /// Bias-free convolution weight `[out, in/groups, k, k]`.
    pub fn conv(name: impl Into<String>, out: usize, inp: usize, k: usize) -> Self {
        Self::new(
            name,
            vec![out, inp, k, k],
            Init::KaimingUniform { fan_in: inp * k * k },
        )
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters keyed by dotted path; iteration order is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Materialise `specs` in sorted-name order, drawing from `rng`.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut store = Self::new();
        for spec in sorted {
            let tensor = match spec.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape.clone(), |_| {
                        T::from_f64(rng.random_range(-bound..bound))
                    })
                }
                Init::Constant(v) => Tensor::full(spec.shape.clone(), T::from_f64(v)),
            };
            store.insert(&spec.name, tensor)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(tensor.shape().to_vec());
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor,
                grad,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.tensor.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Add the tape gradients of bound leaves into the accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(var)) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            tensor: p.tensor.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tape variables for every parameter of a store, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind names to variables created elsewhere.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
