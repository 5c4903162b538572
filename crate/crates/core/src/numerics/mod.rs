//! Dense linear algebra, stable probability kernels, seeded randomness and the
//! finite-difference gradient oracle.

pub mod fd;
pub mod linalg;
pub mod prob;
pub mod rng;

pub use fd::{fd_gradient, max_relative_error};
pub use linalg::{cholesky_solve, dot, norm, Matrix, Vector};
pub use prob::{cosine_similarity, cosine_with_grad, log_sum_exp, softmax};
pub use rng::{derive_seed, RngStream, RNG_ALGORITHM};
