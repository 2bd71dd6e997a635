//! Cross-space image retrieval: a convolutional image tower and an
//! idf-weighted word-embedding query tower mapped into one vector space,
//! trained on clickthrough pairs with a min-margin objective.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`). Training and
//! serving run in `f32`; gradient checks run in `f64`.

pub mod clickgraph;
pub mod digest;
pub mod error;
pub mod evaluator;
pub mod image_encoder;
pub mod io;
pub mod model;
pub mod objective;
pub mod retrieval;
pub mod scalar;
pub mod seed;
pub mod synthgen;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;

pub use error::{CsmError, Result};
pub use scalar::Real;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type NetworkParams32 = image_encoder::NetworkParams<f32>;
pub type NetworkParams64 = image_encoder::NetworkParams<f64>;
pub type WordTable32 = text_encoder::WordEmbeddingTable<f32>;
pub type WordTable64 = text_encoder::WordEmbeddingTable<f64>;
pub type Model32 = model::CsmModel<f32>;
pub type Model64 = model::CsmModel<f64>;
