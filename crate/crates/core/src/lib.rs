//! Topic-supervised discrete speech units at desk scale.
//!
//! The crate covers the full loop: acoustic features from audio, k-means
//! pseudo-labels, adjacent-deduplicated pseudo-texts, LDA topic labels via
//! variational inference, a small masked-prediction transformer with a
//! fixed CLS slot and an auxiliary topic-classification head, iterative
//! relabeling from an intermediate layer, and purity-based analysis of
//! what the topics capture.
//!
//! Numeric kernels are generic over [`num::Real`] (`f32`/`f64`); the
//! aliases below pin the instantiations used by the pipeline. Encoder
//! training runs in `f64` throughout so gradient checks stay tight.

pub mod corpus;
pub mod error;
pub mod features;
pub mod lda;
pub mod matrix;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod quantizer;

pub mod encoder;

pub use error::{Error, Result};

/// Row-major matrix in on-disk feature precision.
pub type Mat32 = matrix::Matrix<f32>;
/// Row-major matrix in model/training precision.
pub type Mat64 = matrix::Matrix<f64>;
/// Feature matrices as stored in feature files.
pub type Feats32 = features::FeatureMatrix<f32>;
/// Feature matrices at oracle/test precision.
pub type Feats64 = features::FeatureMatrix<f64>;
/// Codebooks over on-disk features.
pub type Codebook32 = quantizer::Codebook<f32>;
/// Topic models are fit and stored in f64.
pub type LdaModel64 = lda::LdaModel<f64>;
