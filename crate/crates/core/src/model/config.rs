//! Architecture and loss hyper-parameters for the encoder-decoder model.

use super::ModelError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Conformer blocks in the encoder.
    pub enc_layers: usize,
    /// Attention heads (encoder and decoder share the head count).
    pub enc_heads: usize,
    /// Model width; must be divisible by `enc_heads`.
    pub enc_dim: usize,
    /// Hidden width of the feed-forward sublayers.
    pub enc_ffn: usize,
    /// Transformer blocks in the decoder.
    pub dec_layers: usize,
    /// Frame-rate reduction of the convolutional front-end. Only 4 is
    /// supported (two stride-2 convolutions).
    pub subsample_factor: usize,
    /// Depthwise convolution kernel inside each conformer block; odd.
    pub conv_kernel: usize,
    /// CTC share of the joint training loss, in [0, 1].
    pub ctc_weight: f64,
    pub dropout: f64,
    /// Label smoothing mass for the decoder cross-entropy.
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    /// A configuration small enough to train on a single CPU core in
    /// minutes while keeping every architectural ingredient.
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            enc_heads: 4,
            enc_dim: 64,
            enc_ffn: 256,
            dec_layers: 2,
            subsample_factor: 4,
            conv_kernel: 7,
            ctc_weight: 0.3,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    /// The full-size configuration used for real corpora.
    pub fn full_scale() -> Self {
        ModelConfig {
            enc_layers: 12,
            enc_heads: 4,
            enc_dim: 256,
            enc_ffn: 2048,
            dec_layers: 6,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return fail(format!(
                "enc_dim {} must be divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            ));
        }
        if self.enc_dim % 2 != 0 {
            return fail("enc_dim must be even for sinusoidal positions".into());
        }
        if self.subsample_factor != 4 {
            return fail(format!(
                "subsample_factor {} unsupported; only 4 is implemented",
                self.subsample_factor
            ));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return fail(format!("ctc_weight {} outside [0, 1]", self.ctc_weight));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        Ok(())
    }

    /// Number of encoder frames produced for `t` input feature frames.
    pub fn subsampled_len(&self, t: usize) -> usize {
        // two stride-2 convs with kernel 3 and padding 1: ceil(t / 4)
        let once = |n: usize| (n + 2 - 3) / 2 + 1;
        once(once(t))
    }
}
