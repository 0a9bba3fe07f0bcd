//! Multi-task cross-modal alignment and conversion prediction over a gated
//! mixture of transformer experts, with a small reverse-mode autograd engine.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{CameNN, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tasks::Task;
pub use tensor::Tensor;
