//! Residual attention networks on a small reverse-mode autodiff engine.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
