//! Minimal dense-tensor algebra with reverse-mode automatic differentiation.
//!
//! Values are 64-bit row-major [`Tensor`]s. Computations are recorded on a
//! [`Graph`] (a tape in creation order, which is already a topological order)
//! and differentiated with [`Graph::backward`]. Trainable weights live in a
//! [`ParamStore`] and are bound into a graph through a [`Session`].

mod error;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Session};
pub use tensor::Tensor;
