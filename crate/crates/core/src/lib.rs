//! Residual blocks with scaled, normalized, and recursive skip connections.
//!
//! The crate bundles a small double-precision reverse-mode autodiff engine
//! ([`tape`]), layer and batch normalization ([`norm`]), every block
//! construction ([`block`]) and stacked models ([`model`]), the exact unrolled
//! decomposition of recursive layer-normalized blocks ([`ratio`]),
//! gradient-norm diagnostics ([`diagnostics`]), and a deterministic SGD
//! harness for construction sweeps ([`train`]).

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod benchmark;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod norm;
pub mod ratio;
pub mod tape;
pub mod tensor;
pub mod train;

pub use block::{ResidualBlock, ResidualBranch, SkipConstruction, SkipKind};
pub use error::{Error, Result};
pub use model::{build_model, ModelConfig, ResidualModel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
