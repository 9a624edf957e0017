//! Minimal reverse-mode differentiation over dense row-major arrays.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the record in reverse to populate gradients. The primitive set is
//! exactly what the classifier stack needs: matrix products, broadcasting
//! adds, layer normalization, exact GELU, embedding lookup, packed causal
//! attention and the two training losses.

mod gradcheck;
mod graph;
mod tensor;
#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, grad_check_seeded, grad_check_with};
pub use graph::{Graph, KlDirection, Primitive, Queries, Var};
pub use tensor::{matmul_plain, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    Contract(String),
}
