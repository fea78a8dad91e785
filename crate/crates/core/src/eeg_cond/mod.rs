//! EEG conditioning: band filtering, sliding windows, spectrograms and the
//! embedding into condition tokens.

mod band;
mod embed;
mod filter;
mod stft;
mod window;

pub use band::{BandName, BandSpec};
pub use embed::{
    band_pool, condition_features, embed_condition, token_group, ConditionEmbedding, ConditionTokens, POOLED_BANDS,
};
pub use filter::{bandpass_filter, Biquad, SosFilter};
pub use stft::{stft_features, AnalysisWindow, StftConfig, TimeFreqFeatures};
pub use window::{slide_sample, EegWindow, WINDOW_S};

use ndarray::Array2;

use crate::error::{input_err, Result};

/// Multichannel recording, `channels × samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
    pub t0_s: f64,
}

impl EegRecording {
    pub fn new(samples: Array2<f64>, sample_rate_hz: f64, t0_s: f64) -> Result<Self> {
        if !(sample_rate_hz > 0.0) {
            return Err(input_err(format!("sample rate must be positive, got {sample_rate_hz}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(input_err("EEG contains non-finite samples"));
        }
        Ok(EegRecording { samples, sample_rate_hz, t0_s })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.ncols() as f64 / self.sample_rate_hz
    }
}
