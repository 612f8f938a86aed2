//! Reverse-mode differentiation, MLPs and the two optimizers used in training.

mod check;
mod mlp;
mod optim;
mod params;
mod tape;

pub use check::{finite_diff_check, FdReport, FD_FLOOR};
pub use mlp::{Activation, Init, MlpSpec, OutputActivation};
pub use optim::{adam_step, sgd_nesterov_step, OptState, OptimizerKind};
pub use params::{Gradients, ParamStore};
pub use tape::{Tape, Var};
