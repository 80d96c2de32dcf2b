//! Minimal deterministic f64 tensor engine.
//!
//! Values live in a [`Graph`] tape; reverse-mode gradients come from
//! [`Graph::backward`]. Parameters are held in a [`ParameterSet`] and updated
//! by [`adam_step`]. Everything runs single-threaded, so identical inputs give
//! bitwise-identical outputs.

pub mod checkpoint;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_strided};
pub use graph::{sinusoidal_frequencies, Bindings, Gradients, Graph, Var};
pub use nn::{linear, norm_groups, self_attention, AttentionWeights};
pub use optim::{adam_step, clip_grad_norm, grad_norm, AdamState};
pub use tensor::{ParameterSet, Tensor};
