//! Explanation masks for frozen, pre-trained networks.
//!
//! A trainable explanation network reads the features a frozen base model
//! extracts from an input and emits a mask over that input. The masked input
//! is pushed back through the whole base model, and the explainer is trained
//! to keep the base model's predictions while keeping the mask small.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), the layers needed to build toy-scale base and explainer
//! networks ([`nn`]), the masked-model assembly ([`mask`]), losses and mask
//! regularizers ([`objectives`]), optimizers and training loops
//! ([`train`]), synthetic tasks with planted ground truth ([`tasks`]) and
//! attribution metrics ([`eval`]). [`presets`] bundles toy architectures
//! for the three tasks.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod nn;
pub mod objectives;
pub mod presets;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Fill, Padding, Tensor};
