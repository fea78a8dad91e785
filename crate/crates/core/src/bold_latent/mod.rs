//! BOLD side of the pipeline: frame sequences, the VAE and patch tokens.

mod patch;
mod vae;

pub use patch::{patchify, unpatchify, LatentGrid, LatentTokens};
pub use vae::{gaussian_kl, train_vae, ElboTerms, Vae, VaeConfig, VaeHyper};

use ndarray::{Array2, Array3, Axis};

use crate::error::{input_err, Result};

/// Frames of a cortical map sampled every `tr_s` seconds,
/// `frames × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoldFrameSequence {
    pub frames: Array3<f64>,
    pub tr_s: f64,
    pub t0_s: f64,
}

impl BoldFrameSequence {
    pub fn new(frames: Array3<f64>, tr_s: f64, t0_s: f64) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(input_err("BOLD frames contain non-finite values"));
        }
        if !(tr_s > 0.0) {
            return Err(input_err("TR must be positive"));
        }
        Ok(BoldFrameSequence { frames, tr_s, t0_s })
    }

    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, k: usize) -> Array2<f64> {
        self.frames.index_axis(Axis(0), k).to_owned()
    }

    pub fn onset_s(&self, k: usize) -> f64 {
        self.t0_s + k as f64 * self.tr_s
    }

    /// Scalar mean and standard deviation over every frame and cell.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.frames.len() as f64;
        let mean = self.frames.sum() / n;
        let var = self.frames.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// `(x − mean) / std` applied to every value.
    pub fn standardized(&self, mean: f64, std: f64) -> Self {
        let std = if std > 0.0 { std } else { 1.0 };
        BoldFrameSequence { frames: self.frames.mapv(|v| (v - mean) / std), tr_s: self.tr_s, t0_s: self.t0_s }
    }

    /// Averages consecutive groups of `factor` frames.
    pub fn decimate(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.len() % factor != 0 {
            return Err(input_err(format!("{} frames do not split into groups of {factor}", self.len())));
        }
        let (_, h, w) = self.frames.dim();
        let n = self.len() / factor;
        let mut out = Array3::zeros((n, h, w));
        for k in 0..n {
            let group = self.frames.slice(ndarray::s![k * factor..(k + 1) * factor, .., ..]);
            out.index_axis_mut(Axis(0), k).assign(&group.mean_axis(Axis(0)).expect("non-empty"));
        }
        BoldFrameSequence::new(out, self.tr_s * factor as f64, self.t0_s)
    }
}
