//! Entity-aware Transformer-XL encoder-decoder for abstractive summarization.

pub mod ablation;
pub mod attention;
pub mod decode;
pub mod error;
pub mod linker;
pub mod model;
pub mod optim;
pub mod rng;
pub mod rouge;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod transe;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Summarizer64 = model::Summarizer<f64>;
pub type Summarizer32 = model::Summarizer<f32>;
pub type TransEEmbeddings64 = transe::TransEEmbeddings<f64>;
