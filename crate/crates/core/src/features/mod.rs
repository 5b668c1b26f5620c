//! Acoustic front-end: log-mel filterbank extraction, corpus-level
//! mean/variance normalization, SpecAugment masking, and the binary
//! feature archive format.

mod archive;
mod cmvn;
mod fbank;
mod specaugment;

pub use archive::{ArchiveReader, ArchiveWriter};
pub use cmvn::{apply_cmvn, estimate_cmvn, CmvnStats, VAR_FLOOR};
pub use fbank::{compute_fbank, mel_filterbank, FbankConfig};
pub use specaugment::{spec_augment, SpecAugmentPolicy};

use crate::mat::Mat;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },
    #[error("sample rate mismatch: audio {got} Hz, config {want} Hz")]
    RateMismatch { got: u32, want: u32 },
    #[error("feature matrix for {utt_id} contains non-finite values")]
    NonFinite { utt_id: String },
    #[error("archive error: {0}")]
    Archive(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Time-major feature matrix with framing metadata.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<T: Scalar> {
    pub utt_id: String,
    pub frames: Mat<T>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !self.frames.is_finite() {
            return Err(FeatureError::NonFinite {
                utt_id: self.utt_id.clone(),
            });
        }
        Ok(())
    }
}
