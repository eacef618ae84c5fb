//! Screenshot-centric retrieval toolkit.
//!
//! Multimodal documents are handled uniformly as screenshots. The crate covers
//! the corpus data model and collection filters, embedding composition and
//! storage, a two-stage contrastive trainer for a linear dual encoder,
//! exact top-k search, hard-negative mining, visual-token-budget resizing,
//! and benchmark construction and evaluation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at the
//! crate root pin the precision used by the pipelines: 32-bit storage for
//! embeddings and indices, 64-bit for training.

pub mod benchmark;
pub mod corpus;
pub mod embedding;
pub mod fsio;
pub mod index;
pub mod mining;
pub mod resize;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use scalar::Scalar;

/// Stored embedding (32-bit entries, 64-bit dot products).
pub type EmbeddingVector = embedding::Embedding<f32>;
/// Exact cosine index over 32-bit rows.
pub type VectorIndex = index::Index<f32>;
/// Trainable dual encoder in 64-bit precision.
pub type DualEncoderParams = training::DualEncoder<f64>;
/// Batch of feature rows for the 64-bit trainer.
pub type TrainingBatch = training::Batch<f64>;
/// Real matrix used by the trainer.
pub type Matrix = ndarray::Array2<f64>;
