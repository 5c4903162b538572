#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod propcheck;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, ProbBatch};
pub use model::{Batch, ModelParams};
pub use numerics::{Matrix, RngStream, Vector};
pub use scalar::Scalar;

pub type Vec64 = Vector<f64>;
pub type Mat64 = Matrix<f64>;
pub type Params64 = ModelParams<f64>;
pub type Batch64 = Batch<f64>;
pub type ProbBatch64 = ProbBatch<f64>;
pub type LossBreakdown64 = LossBreakdown<f64>;
