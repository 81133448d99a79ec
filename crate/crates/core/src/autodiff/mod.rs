//! Dense-network kernel: row-major tensors, MLP forward/backward with a
//! recorded tape, Adam, and finite-difference gradient checks.

mod adam;
mod gradcheck;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, AdamState, FlatAdam};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use mlp::{Activation, Dense, GradTape, MlpGrads, MlpParams};
pub use tensor::{Scalar, Tensor2};
