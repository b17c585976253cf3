//! Core of the CASA forecaster: a small dense tensor with reverse-mode
//! autodiff, the layers and encoder blocks of the model, the training loop
//! and the numerical pieces of the correlation/scaling analysis.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, timing and
//! the command line live in the companion `casa` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod data;
mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AttentionKind, CasaModel, ModelConfig, SoftmaxAxis};
pub use nn::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
