//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] walks it
//! in reverse. Ops defined outside this module can join the tape through
//! [`Graph::push_op`] and a [`BackwardOp`] implementation.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use conv::{conv3d_forward, conv_transpose3d_forward, ConvSpec};
pub use graph::{BackwardCtx, BackwardOp, Graph, Var};
pub use ops::{BatchNormParams, BATCH_NORM_EPS};
pub use tensor::{Scalar, Tensor};
