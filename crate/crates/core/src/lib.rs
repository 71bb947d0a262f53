//! Cross-residual multitask networks on a small reverse-mode autodiff engine.

pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, Tensor, Var};
