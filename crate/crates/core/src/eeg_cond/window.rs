use ndarray::{s, Array2};

use super::EegRecording;
use crate::error::{config_err, input_err, Result};

/// Default EEG history per BOLD frame, in seconds.
pub const WINDOW_S: f64 = 6.0;

/// A fixed-length slice of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct EegWindow {
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
    pub onset_s: f64,
    pub stride_index: usize,
}

impl EegWindow {
    pub fn end_s(&self) -> f64 {
        self.onset_s + self.samples.ncols() as f64 / self.sample_rate_hz
    }
}

fn whole_samples(seconds: f64, fs: f64, what: &str) -> Result<usize> {
    let n = seconds * fs;
    if (n - n.round()).abs() > 1e-6 {
        return Err(config_err(format!("{what} of {seconds} s is not a whole number of samples at {fs} Hz")));
    }
    Ok(n.round() as usize)
}

/// Windows of `window_s` seconds at onsets `0, stride, 2·stride, …`.
///
/// The number of windows is `floor((duration − window) / stride) + 1`.
pub fn slide_sample(rec: &EegRecording, window_s: f64, stride_s: f64) -> Result<Vec<EegWindow>> {
    let fs = rec.sample_rate_hz;
    if !(stride_s > 0.0) {
        return Err(config_err("stride must be positive"));
    }
    let len = whole_samples(window_s, fs, "window")?;
    let hop = whole_samples(stride_s, fs, "stride")?;
    if len == 0 || hop == 0 {
        return Err(config_err("window and stride must span at least one sample"));
    }
    let total = rec.samples.ncols();
    if total < len {
        return Err(input_err(format!(
            "recording of {:.3} s is shorter than one {window_s} s window",
            total as f64 / fs
        )));
    }
    let count = (total - len) / hop + 1;
    Ok((0..count)
        .map(|i| EegWindow {
            samples: rec.samples.slice(s![.., i * hop..i * hop + len]).to_owned(),
            sample_rate_hz: fs,
            onset_s: rec.t0_s + (i * hop) as f64 / fs,
            stride_index: i,
        })
        .collect())
}
