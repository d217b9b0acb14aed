//! Named parameter tensors with a role tag used for fast/slow partitioning.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Encoder,
    MissionEmbedding,
    /// Per-module recurrent cell weights.
    ModuleDynamics,
    /// Per-module query projection of the input attention.
    ModuleQuery,
    InputAttention,
    NullRow,
    CommAttention,
    /// Monolithic recurrent core of the LSTM baselines.
    LstmCore,
    PolicyHead,
    ValueHead,
}

impl ParamRole {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ParamRole::InputAttention | ParamRole::NullRow | ParamRole::CommAttention
        )
    }

    pub fn is_module(self) -> bool {
        matches!(self, ParamRole::ModuleDynamics | ParamRole::ModuleQuery)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            role,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±scale`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-scale..=scale)))
            .collect();
        self.add(name, role, Tensor::from_parts(shape.to_vec(), data))
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

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Stores gradients produced by a backward pass (indexed by id).
    pub fn set_grads(&mut self, grads: Vec<Option<Tensor<T>>>) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
    }

    /// SHA-256 over names, shapes and raw values of the selected parameters.
    pub fn content_hash(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = &self.params[id.0];
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.hash_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
