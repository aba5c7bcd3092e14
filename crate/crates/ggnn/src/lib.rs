//! Gated graph (sequence) neural networks over typed directed graphs, built
//! on a small reverse-mode tape, together with the synthetic reasoning tasks,
//! RNN/LSTM token baselines, and the heap-to-formula pipeline used to
//! exercise them end to end.

pub mod baselines;
pub mod contraction;
pub mod error;
pub mod graph;
pub mod model;
pub mod output;
pub mod params;
pub mod propagation;
pub mod seplogic;
pub mod sequence;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{AnnotationMatrix, EdgeTypeId, NodeId, SymbolicInstance, TypedGraph};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
