use std::f64::consts::PI;

use ndarray::Array3;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::EegWindow;
use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisWindow {
    #[default]
    Hann,
    Rectangular,
}

impl AnalysisWindow {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            // periodic Hann
            AnalysisWindow::Hann => (0..len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos()).collect(),
            AnalysisWindow::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: AnalysisWindow,
}

impl StftConfig {
    /// One-second Hann frames with half overlap.
    pub fn for_rate(sample_rate_hz: f64) -> Self {
        let frame_len = sample_rate_hz.round() as usize;
        StftConfig { frame_len, hop: frame_len / 2, window: AnalysisWindow::Hann }
    }

    pub fn time_bins(&self, window_len: usize) -> usize {
        (window_len - self.frame_len) / self.hop + 1
    }

    pub fn freq_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }
}

/// One-sided magnitude spectrogram of every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFreqFeatures {
    /// `channels × frequency bins × time bins`.
    pub magnitudes: Array3<f64>,
    pub bin_freqs_hz: Vec<f64>,
    /// Centre time of each analysis frame.
    pub bin_times_s: Vec<f64>,
}

pub fn stft_features(win: &EegWindow, cfg: &StftConfig) -> Result<TimeFreqFeatures> {
    let len = win.samples.ncols();
    if cfg.frame_len == 0 || cfg.frame_len > len {
        return Err(config_err(format!("STFT frame of {} samples does not fit a {len}-sample window", cfg.frame_len)));
    }
    if cfg.hop == 0 || cfg.hop > cfg.frame_len {
        return Err(config_err(format!("STFT hop {} must lie in 1..={}", cfg.hop, cfg.frame_len)));
    }
    let fs = win.sample_rate_hz;
    let n_time = cfg.time_bins(len);
    let n_freq = cfg.freq_bins();
    let taper = cfg.window.coefficients(cfg.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.frame_len);

    let mut magnitudes = Array3::zeros((win.samples.nrows(), n_freq, n_time));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.frame_len];
    for (ch, row) in win.samples.rows().into_iter().enumerate() {
        for t in 0..n_time {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(row[start + i] * taper[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..n_freq {
                magnitudes[[ch, f, t]] = buf[f].norm();
            }
        }
    }
    let bin_freqs_hz = (0..n_freq).map(|f| f as f64 * fs / cfg.frame_len as f64).collect();
    let bin_times_s = (0..n_time)
        .map(|t| win.onset_s + (t * cfg.hop) as f64 / fs + cfg.frame_len as f64 / (2.0 * fs))
        .collect();
    Ok(TimeFreqFeatures { magnitudes, bin_freqs_hz, bin_times_s })
}
