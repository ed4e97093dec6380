//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Graphs are built eagerly: every op computes its value immediately and
//! remembers a backward rule. [`Var::backward`] walks the graph from a
//! scalar and returns gradients for the leaves. Parameters live outside the
//! graph as [`Param`]s and enter it through a [`Ctx`].

mod array;
mod conv;
mod error;
pub mod gradcheck;
mod ops;
mod param;
mod var;

pub use array::Array;
pub use conv::{conv_output_size, ConvGeometry};
pub use error::{Result, TensorError};
pub use param::{Ctx, Param, ParamId};
pub use var::{BackwardFn, Gradients, Var};
