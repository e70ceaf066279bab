//! Named parameter storage with deterministic, order-independent init.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(3 / fan_in), fan_in = C_in·k·k.
    FanInUniform,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Every trainable tensor of a model, addressed by [`ParamId`] or name.
///
/// Each parameter draws from its own RNG stream keyed by `(seed, name)`, so
/// adding or removing a layer never changes how the others initialize.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
}

/// FNV-1a, stable across platforms and releases (unlike `DefaultHasher`).
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

pub fn fan_in_bound(shape: Shape) -> f64 {
    (3.0 / (shape.c * shape.h * shape.w) as f64).sqrt()
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: Shape, init: Init) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let data = match init {
            Init::Constant(v) => vec![v; shape.numel()],
            Init::FanInUniform => {
                let bound = fan_in_bound(shape);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                (0..shape.numel()).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    /// Inserts an explicit tensor, e.g. from a checkpoint.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(true),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.shape().numel()).sum()
    }

    /// Scalar parameter count over tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.shape().numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies values from `other` for every parameter name both stores share
    /// with identical shapes; returns how many were copied.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.tensor(id);
                if src.shape() != p.tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load parameters",
                        lhs: p.tensor.shape(),
                        rhs: src.shape(),
                    });
                }
                p.tensor.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}
