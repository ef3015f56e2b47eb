//! Minimal differentiable tensor core.

mod attention;
mod conv;
mod gradcheck;
mod graph;
mod norm;
mod ops;
mod tensor;

pub use attention::AttentionWeights;
pub use conv::{avg_pool2d_tensor, conv2d_tensor, Conv2dSpec};
pub use gradcheck::{grad_check, grad_check_many, grad_check_with_params, relative_error, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use ops::{gelu_scalar, sigmoid_scalar};
pub use tensor::{DType, Float, Tensor, TENSOR_MAGIC, TENSOR_VERSION};
pub(crate) use tensor::Cursor;

