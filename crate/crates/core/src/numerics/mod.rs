//! Dense tensors, neural primitives and reverse-mode differentiation.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, GradCheck, GradCheckReport};
pub use ops::ConvSpec;
pub use tape::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
