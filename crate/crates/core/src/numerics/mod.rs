//! Dense linear algebra, isotropic Gaussians and deterministic random streams.

mod gauss;
mod matrix;
mod rng;
mod svd;

pub use gauss::{gauss_logpdf, sample_gaussian};
pub use matrix::{add_vec, argmax, dot, norm2, softmax, sub_vec, Matrix, Vector};
pub use rng::RngStream;
pub use svd::{penrose_residual, pinv, pinv_with, svd, svd_with, Svd, SvdOptions, DEFAULT_RCOND};
