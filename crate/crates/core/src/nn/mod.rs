//! Dense tensors, reverse-mode autodiff, layers, and the optimizer.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod relpos;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use layers::{FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use relpos::{Position, RelativeBuckets};
pub use scalar::Scalar;
pub use tensor::Tensor;
