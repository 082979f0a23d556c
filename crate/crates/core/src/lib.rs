//! Joint gradient-based search of data-augmentation policies and
//! convolutional cell architectures.
//!
//! The crate couples a differentiable augmentation policy (sub-policies of
//! Gumbel-weighted image operations with learnable selection logits,
//! probabilities and magnitudes) to a differentiable cell-based
//! architecture search (mixed operations on DAG edges), optimized together
//! by an alternating first-order bilevel loop: search parameters step on
//! validation batches, network weights on training batches, with both
//! gradients coming from a single backward pass per step.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`); the
//! concrete single-precision aliases below are what the CLI and the
//! acceptance suite use.

pub mod arch;
pub mod artifacts;
pub mod augment;
pub mod data;
pub mod error;
pub mod params;
pub mod gradcheck;
pub mod optim;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

/// Production single-precision aliases.
pub type Tensor = tensor::Tensor<f32>;
pub type Tape = tape::Tape<f32>;
pub type Gradients = tape::Gradients<f32>;
