//! Dense tensors, a small reverse-mode graph and AdamW.

mod graph;
mod optim;
mod tensor;

pub use graph::{sinusoidal_embedding, Bindings, Graph, NodeId, OpKind};
pub use optim::{AdamConfig, OptimizerState};
pub use tensor::{hash_named, NamedTensors, Tensor};

pub(crate) use tensor::digest_u64;
