//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Graph`] by registering inputs with [`Graph::leaf`] (differentiable)
//! or [`Graph::constant`], combine them with the primitive methods, then call
//! [`Graph::backward`] on a scalar node to obtain [`Gradients`] for every leaf.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_at, FnRecipe, GradRecipe, GradcheckReport};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use tensor::Tensor;

