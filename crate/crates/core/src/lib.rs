//! Mixture-of-experts knowledge editing over a frozen tiny transformer.
//!
//! The crate bundles a small reference transformer with reverse-mode
//! differentiation, the MEMoE bypass adapter with knowledge-anchor routing,
//! the batch and sequential editing protocols, the edit metrics, and a
//! deterministic synthetic fact corpus.

pub mod anchor;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod memoe;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use memoe::{AdapterState, GateDecision, GateMode, MemoeConfig, RoutingContext, RoutingStrategy};
pub use model::{ModelConfig, ModelSnapshot};
pub use tensor::Tensor;
