pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fft;
pub mod gip;
pub mod hfie;
pub mod infer;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Ablation, BgCrack, ModelConfig};
pub use tensor::Tensor;
