// Negated comparisons are used on purpose so that NaN fails validation;
// index loops follow the matrix notation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod config;
pub mod dcm;
pub mod error;
pub mod graddiff;
pub mod numerics;
pub mod proxy;
pub mod scm;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Result, TcmError};
