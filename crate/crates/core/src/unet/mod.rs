//! Encoder–decoder network trained from scratch on CPU.
//!
//! Layers are implemented directly on NCHW tensors with im2col + GEMM;
//! the same code runs in `f32` for training and `f64` for gradient checks.

mod adam;
mod generator;
mod layers;
mod loss;
mod model;
mod tensor;
mod train;
mod weights;

pub use adam::Adam;
pub use generator::ContinuousGenerator;
pub use loss::{class_labels, class_weights, mae, weighted_cross_entropy, Loss};
pub use model::{Head, Model, Param, Tape, UNetConfig};
pub use tensor::{Scalar, Tensor4};
pub use train::{infer_full, infer_probs, loss_and_grads, Target, TrainConfig, Trainer};
pub use weights::{apply_weights, load_model, load_weights, read_weights, save_weights, write_weights, WeightFile, FORMAT_VERSION};

/// Single-precision network used for training and inference.
pub type Net = Model<f32>;
