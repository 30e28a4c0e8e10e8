//! Byte-level language-model laboratory for cascaded multi-token prediction:
//! a small decoder-only transformer whose extra heads are trained with a
//! gradient-detached, TopN-selected self-distillation loss, extended by
//! looped weight copying, and evaluated with main-head-constrained
//! speculative decoding.

pub mod autodiff;
pub mod losses;
pub mod model;
pub mod train;

pub use autodiff::{argmax, AutodiffError, Graph, Tensor, Value};
