//! Dense tensors, deterministic kernels, autodiff and optimization.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, CheckConfig, CheckReport};
pub use rng::Rng;
pub use tape::{KeyLists, Tape, Var};
pub use tensor::{matmul, rmsnorm, softmax_rows, Tensor};
