//! Parameterized neural building blocks and the parameter store.

mod checkpoint;
mod init;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use init::init_params;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::elem::Elem;
use crate::tensor::{Result as TensorResult, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("parameter '{0}' not found in store")]
    MissingParam(String),
    #[error("parameter '{0}' already present in store")]
    DuplicateParam(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Named mapping from parameter path to tensor. Iteration order is
/// lexicographic (`BTreeMap`), which fixes the order of every optimizer
/// sweep and checkpoint record.
pub struct ParamStore<E: Elem> {
    params: BTreeMap<String, Tensor<E>>,
    rng_seed: u64,
}

impl<E: Elem> ParamStore<E> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Shallow copy sharing the underlying tensors (and their storage).
    pub fn share(&self) -> Self {
        ParamStore {
            params: self.params.clone(),
            rng_seed: self.rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<E>) -> Result<(), NnError> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor<E>, NnError> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// All parameters in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.params.iter()
    }

    /// Trainable parameters (frozen backbone excluded) in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.params.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

/// Fully connected layer computing `x · Wᵀ + b`.
pub struct LinearLayer<E: Elem> {
    pub weight: Tensor<E>, // D_out × D_in
    pub bias: Tensor<E>,   // D_out
}

impl<E: Elem> LinearLayer<E> {
    pub fn from_store(store: &ParamStore<E>, prefix: &str) -> Result<Self, NnError> {
        Ok(LinearLayer {
            weight: store.get(&format!("{prefix}.weight"))?,
            bias: store.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> TensorResult<Tensor<E>> {
        x.matmul(&self.weight.transpose()?)?.add_row(&self.bias)
    }
}

/// Multi-head attention with full-width projections; columns are partitioned
/// across heads and the concatenation is projected by `w_o`.
pub struct MultiHeadAttention<E: Elem> {
    pub num_heads: usize,
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub w_o: Tensor<E>,
}

impl<E: Elem> MultiHeadAttention<E> {
    pub fn from_store(
        store: &ParamStore<E>,
        prefix: &str,
        num_heads: usize,
    ) -> Result<Self, NnError> {
        Ok(MultiHeadAttention {
            num_heads,
            w_q: store.get(&format!("{prefix}.w_q"))?,
            w_k: store.get(&format!("{prefix}.w_k"))?,
            w_v: store.get(&format!("{prefix}.w_v"))?,
            w_o: store.get(&format!("{prefix}.w_o"))?,
        })
    }

    /// Scaled dot-product attention, unmasked. `q` is S_q×D, `k` and `v`
    /// are S_k×D with equal row counts.
    pub fn forward(
        &self,
        q: &Tensor<E>,
        k: &Tensor<E>,
        v: &Tensor<E>,
    ) -> TensorResult<Tensor<E>> {
        use crate::tensor::TensorError;
        let d = self.w_q.shape()[0];
        if q.shape().len() != 2 || q.shape()[1] != d {
            return Err(TensorError::Dimension {
                op: "mha",
                detail: format!("query shape {:?} vs model dim {d}", q.shape()),
            });
        }
        if k.shape() != v.shape() || k.shape().len() != 2 || k.shape()[1] != d {
            return Err(TensorError::Dimension {
                op: "mha",
                detail: format!("key {:?} / value {:?} mismatch", k.shape(), v.shape()),
            });
        }
        if d % self.num_heads != 0 {
            return Err(TensorError::Contract {
                op: "mha",
                detail: format!("dim {d} not divisible by {} heads", self.num_heads),
            });
        }
        let dh = d / self.num_heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let qp = q.matmul(&self.w_q)?;
        let kp = k.matmul(&self.w_k)?;
        let vp = v.matmul(&self.w_v)?;
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = qp.slice_cols(h * dh, dh)?;
            let kh = kp.slice_cols(h * dh, dh)?;
            let vh = vp.slice_cols(h * dh, dh)?;
            let weights = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax()?;
            heads.push(weights.matmul(&vh)?);
        }
        Tensor::concat_cols(&heads)?.matmul(&self.w_o)
    }

    /// Attention weights of one head (for property tests).
    pub fn attention_weights(
        &self,
        q: &Tensor<E>,
        k: &Tensor<E>,
        head: usize,
    ) -> TensorResult<Tensor<E>> {
        let d = self.w_q.shape()[0];
        let dh = d / self.num_heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let qh = q.matmul(&self.w_q)?.slice_cols(head * dh, dh)?;
        let kh = k.matmul(&self.w_k)?.slice_cols(head * dh, dh)?;
        qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax()
    }
}

/// Two-layer MLP with a ReLU in between; input and output width both D.
pub struct MlpBlock<E: Elem> {
    pub fc1: LinearLayer<E>,
    pub fc2: LinearLayer<E>,
}

impl<E: Elem> MlpBlock<E> {
    pub fn from_store(store: &ParamStore<E>, prefix: &str) -> Result<Self, NnError> {
        Ok(MlpBlock {
            fc1: LinearLayer::from_store(store, &format!("{prefix}.fc1"))?,
            fc2: LinearLayer::from_store(store, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> TensorResult<Tensor<E>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}
