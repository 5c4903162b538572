//! Desk-scale dual encoder: a linear image encoder against frozen class tokens
//! shifted by one learnable shared context vector, scored by temperature-scaled
//! cosine similarity.

pub mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use forward::{class_logits, encode_class, encode_image, predict_probs, Batch, BatchForward};
pub use params::{Dims, ModelParams, ParamGrad, Trainable};
