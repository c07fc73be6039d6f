use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};

/// Identity of a learnable tensor. Every use of the same id on a tape
/// accumulates into one gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Stable 64-bit FNV-1a, used to derive per-parameter init streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// RNG stream for initializing the parameter `name` under `seed`. Streams
/// are independent of creation order, so adding a parameter never perturbs
/// the initial values of the others.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes()))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Zero-mean normal weights with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_he_normal(&mut self, seed: u64, name: &str, shape: Shape, fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_normal(seed, name, shape, std)
    }

    pub fn add_normal(&mut self, seed: u64, name: &str, shape: Shape, std: f64) -> ParamId {
        let mut rng = init_rng(seed, name);
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
        self.add(name, Tensor { shape, data })
    }

    pub fn add_uniform(&mut self, seed: u64, name: &str, shape: Shape, bound: f64) -> ParamId {
        let mut rng = init_rng(seed, name);
        let dist = rand_distr::Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let data = (0..shape.numel()).map(|_| dist.sample(&mut rng)).collect();
        self.add(name, Tensor { shape, data })
    }

    pub fn add_full(&mut self, name: &str, shape: Shape, value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }
}
