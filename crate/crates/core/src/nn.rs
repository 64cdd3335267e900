//! Named parameter storage and initializers.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Real, Tensor};

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Globally unique parameter address: store group plus index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: u32,
    pub index: u32,
}

/// Parameter groups of the models shipped with the toolkit.
pub mod groups {
    pub const DENOISER: u32 = 1;
    pub const GENERATOR: u32 = 2;
    pub const DISCRIMINATORS: u32 = 3;
}

/// Ordered, named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    group: u32,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(group: u32) -> Self {
        Self {
            group,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn group(&self) -> u32 {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            group: self.group,
            index: id.0 as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> crate::Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != tensor.shape() {
            return Err(crate::error::shape_err!(
                "ParamStore::set",
                "{}: expected {:?}, got {:?}",
                self.names[id.0],
                cur.shape(),
                tensor.shape()
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// `U(-bound, bound)` with `bound = 1 / sqrt(fan_in)`.
pub fn uniform_fan_in<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// `N(0, std²)`.
pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// Initial value distribution of a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Declared name, shape and initializer of one model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Allocates and initializes a store from its declaration, in order.
pub fn build_store<T: Real>(group: u32, specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore<T> {
    let mut store = ParamStore::new(group);
    for s in specs {
        let t = match s.init {
            Init::Uniform { fan_in } => uniform_fan_in(rng, &s.shape, fan_in),
            Init::Normal { std } => normal(rng, &s.shape, std),
            Init::Zeros => Tensor::zeros(&s.shape),
            Init::Ones => Tensor::full(&s.shape, T::one()),
        };
        store.add(s.name.clone(), t);
    }
    store
}

/// Checks that `store` holds exactly the declared parameters, in order.
pub fn check_store<T: Real>(store: &ParamStore<T>, specs: &[ParamSpec]) -> crate::Result<()> {
    if store.len() != specs.len() {
        crate::error::bail_validation!(
            "parameter count mismatch: expected {} tensors, found {}",
            specs.len(),
            store.len()
        );
    }
    for ((_, name, t), s) in store.iter().zip(specs) {
        if name != s.name || t.shape() != s.shape.as_slice() {
            crate::error::bail_validation!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                s.name,
                s.shape,
                name,
                t.shape()
            );
        }
    }
    Ok(())
}

/// Ids of a `weight`/`bias` pair.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    /// Looks up `{prefix}.weight` and `{prefix}.bias`.
    pub fn find<T: Real>(store: &ParamStore<T>, prefix: &str) -> Self {
        let get = |s: &str| {
            store
                .find(&alloc::format!("{prefix}.{s}"))
                .unwrap_or_else(|| panic!("missing parameter {prefix}.{s}"))
        };
        Self {
            weight: get("weight"),
            bias: get("bias"),
        }
    }
}
