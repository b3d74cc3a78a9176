//! Dense `f64` tensors, reverse-mode differentiation, gradient checking,
//! optimizers and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{
    collect_grads, load_checkpoint, save_checkpoint, Module, CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, log_sigmoid, norm, sigmoid, softmax, Tensor};
