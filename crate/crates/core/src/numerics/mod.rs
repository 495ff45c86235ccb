//! Differentiable compute kernel: tensors, a recorded-op graph with
//! reverse-mode gradients, layer bundles, the optimizer and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use layers::{CausalStack, LayerNorm, Linear, Mlp, TransformerBlock};
pub use optim::{AdamW, ConvergenceMonitor, ReduceOnPlateau};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
