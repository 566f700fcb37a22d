//! Minimal deterministic tensor engine: `f64` tensors, a tape-based
//! reverse-mode differentiator, attention and normalization kernels,
//! losses, an Adam optimizer and a binary checkpoint container.
//!
//! Everything is single-threaded and bit-reproducible for a given seed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Container;
pub use error::{EngineError, Result};
pub use graph::{Conv3dSpec, Gradients, Graph, RowMap, Var};
pub use ops::{AttentionMask, AttnLayout};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;
