//! Dense numerics: tensors, a reverse-mode tape, feedforward networks and
//! the Adam optimizer.

mod adam;
mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, Gradients, Mlp, MlpTrace, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tape::{Tape, TapeGrads, Var};
pub use tensor::Tensor;
