//! Reduction of a spectrogram to condition tokens.
//!
//! Magnitudes are averaged within each oscillatory band, giving
//! `channels × 5` features per analysis frame. Frames are then split into
//! `token_count` contiguous groups along time (a frame is reused when there
//! are more tokens than frames) and averaged per group. An affine map takes
//! each group's features to the model width.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{BandName, TimeFreqFeatures};
use crate::error::{config_err, Result};
use crate::nn::normal_mat;

pub const POOLED_BANDS: usize = 5;

/// Time-bin range `[start, end)` feeding token `g` of `tokens`.
pub fn token_group(g: usize, tokens: usize, time_bins: usize) -> (usize, usize) {
    let start = g * time_bins / tokens;
    let end = ((g + 1) * time_bins / tokens).max(start + 1);
    (start, end)
}

/// Band-pooled magnitudes, `time bins × (channels · 5)`, channel-major.
pub fn band_pool(feat: &TimeFreqFeatures) -> Array2<f64> {
    let (channels, _, n_time) = feat.magnitudes.dim();
    let mut pooled = Array2::zeros((n_time, channels * POOLED_BANDS));
    for (b, band) in BandName::OSCILLATORY.iter().enumerate() {
        let (lo, hi) = band.edges();
        let bins: Vec<usize> = feat
            .bin_freqs_hz
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= lo && f < hi)
            .map(|(i, _)| i)
            .collect();
        if bins.is_empty() {
            continue;
        }
        for ch in 0..channels {
            for t in 0..n_time {
                let total: f64 = bins.iter().map(|&f| feat.magnitudes[[ch, f, t]]).sum();
                pooled[[t, ch * POOLED_BANDS + b]] = total / bins.len() as f64;
            }
        }
    }
    pooled
}

/// Band-pooled features averaged into `token_count` time groups.
pub fn condition_features(feat: &TimeFreqFeatures, token_count: usize) -> Result<Array2<f64>> {
    if token_count == 0 {
        return Err(config_err("token count must be positive"));
    }
    let pooled = band_pool(feat);
    let n_time = pooled.nrows();
    if n_time == 0 {
        return Err(config_err("spectrogram has no time bins"));
    }
    let mut out = Array2::zeros((token_count, pooled.ncols()));
    for g in 0..token_count {
        let (start, end) = token_group(g, token_count, n_time);
        let mean = pooled.slice(ndarray::s![start..end, ..]).mean_axis(Axis(0)).expect("non-empty group");
        out.row_mut(g).assign(&mean);
    }
    Ok(out)
}

/// Embedded EEG condition, `token_count × model_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTokens {
    pub tokens: Array2<f64>,
}

impl ConditionTokens {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Affine feature-to-token map. `feature_scale` is a fixed per-feature
/// normaliser; `weight` and `bias` are learned with the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub feature_scale: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl ConditionEmbedding {
    pub fn random(features: usize, width: usize, rng: &mut impl Rng) -> Self {
        ConditionEmbedding {
            feature_scale: Array1::ones(features),
            weight: normal_mat(rng, features, width, 1.0 / (features as f64).sqrt()),
            bias: normal_mat(rng, 1, width, 0.1),
        }
    }

    pub fn features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn width(&self) -> usize {
        self.weight.ncols()
    }

    /// Applies the map to grouped features of shape `tokens × features`.
    pub fn apply(&self, features: &Array2<f64>) -> Result<ConditionTokens> {
        if features.ncols() != self.features() || self.feature_scale.len() != self.features() {
            return Err(config_err(format!(
                "condition features have width {}, embedding expects {}",
                features.ncols(),
                self.features()
            )));
        }
        let scaled = features * &self.feature_scale;
        Ok(ConditionTokens { tokens: scaled.dot(&self.weight) + &self.bias })
    }
}

pub fn embed_condition(feat: &TimeFreqFeatures, params: &ConditionEmbedding, token_count: usize) -> Result<ConditionTokens> {
    params.apply(&condition_features(feat, token_count)?)
}
