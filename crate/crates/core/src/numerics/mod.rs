//! Dense f64 tensors with reverse-mode autodiff, plus transformer blocks.

mod graph;
mod nn;

pub use graph::{gelu_exact, Graph, NodeId, Tensor, NEG_MASK};
pub use nn::{activation, attention, dropout, ffn, ffn_with, multi_head, Activation, MultiHeadParams};
