//! Minimal reverse-mode autodiff over dense row-major arrays.

mod array;
mod graph;
mod params;

pub use array::{gemm, Array, Float};
pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, Mode, ParamSet};
