//! STRNet core: spatio-temporal representation learning for goal-conditioned
//! visual navigation, built on a minimal dense-tensor library with
//! reverse-mode differentiation, plus a desk-scale gridworld simulator for
//! training and evaluating the dual policy/distance heads.

pub mod heads;
pub mod spatial;
pub mod temporal;
pub mod tensor;

pub use tensor::{ElemType, Real, Result, Tensor, TensorError};
