//! Desk-scale speech recognition laboratory: feature extraction, a small
//! conformer encoder-decoder trained with joint CTC/attention losses,
//! cluster-target self-supervised pretraining, n-gram language modelling,
//! beam-search decoding, self-training on pseudo-labelled audio, and an
//! experiment pipeline that wires the stages together reproducibly.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! [`Real`] alias fixes the default precision used by the binaries.

pub mod audio;
pub mod autograd;
pub mod cluster;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod features;
pub mod lm;
pub mod mat;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod ssl;
pub mod sst;
pub mod train;

/// Default scalar type for training and decoding.
pub type Real = f64;
/// Reduced-precision alternative for storage-heavy paths.
pub type Real32 = f32;

pub use mat::Mat;
pub use scalar::Scalar;
