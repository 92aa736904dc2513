//! Referring-expression segmentation with cross-modal self-attention.
//!
//! The crate is built around a small dense-tensor engine with reverse-mode
//! automatic differentiation ([`graph::Graph`]). On top of it sit the model
//! components: a dilated convolutional encoder producing three feature levels
//! at a shared resolution, word embeddings plus an 8-D spatial coordinate map
//! concatenated into a per-word multimodal feature, a cross-modal
//! self-attention block with word attention-aware pooling applied per level,
//! a gated multi-level fusion head that predicts the segmentation mask, and a
//! cross-frame self-attention block for video clips.
//!
//! Everything is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` for training, `f64` for gradient checking); concrete aliases are
//! exported at the crate root.

pub mod cfsa;
pub mod checkpoint;
pub mod cmsa;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod img_io;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the default for training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by the gradient-check suites.
pub type Tensor64 = Tensor<f64>;
/// Single-precision compute graph.
pub type Graph32 = Graph<f32>;
/// Double-precision compute graph.
pub type Graph64 = Graph<f64>;
