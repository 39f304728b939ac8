// SPDX-License-Identifier: Apache-2.0

//! Minimal differentiable numeric kernel: dense tensors, a recording tape with
//! reverse-mode gradients, transformer building blocks, Adam, finite-difference
//! gradient checks and a flat checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod param;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use graph::{Gradients, Graph, Var};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub use rand_chacha::ChaCha8Rng;

/// Deterministic generator used for parameter initialization.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
