//! Paired EEG/BOLD sessions with a known, analytic coupling.
//!
//! Each oscillatory band carries an amplitude envelope made of a
//! state-dependent level (rest/task blocks) times a slow random modulation.
//! EEG channels mix fixed-frequency carriers scaled by those envelopes. BOLD
//! frames on a rectangular grid are driven by a subset of the bands: every
//! driven band owns a Gaussian blob of spatial weights, and the cell value is
//! the weight times the envelope convolved with a double-gamma hemodynamic
//! response, sampled at each frame onset.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::bold_latent::BoldFrameSequence;
use crate::eeg_cond::{BandName, EegRecording};
use crate::error::{config_err, CatdError, Result};
use crate::nn::seeded_rng;

/// Behavioural state of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    Rest,
    Task,
}

impl State {
    /// `1.0` for task, `0.0` for rest.
    pub fn as_f64(self) -> f64 {
        match self {
            State::Rest => 0.0,
            State::Task => 1.0,
        }
    }
}

/// Envelope levels per band, ordered delta, theta, alpha, beta, gamma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePowers {
    pub rest: [f64; 5],
    pub task: [f64; 5],
}

impl StatePowers {
    pub fn level(&self, state: State, band: usize) -> f64 {
        match state {
            State::Rest => self.rest[band],
            State::Task => self.task[band],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub tr_s: f64,
    pub map_height: usize,
    pub map_width: usize,
    pub band_powers_per_state: StatePowers,
    pub hrf_peak_s: f64,
    pub noise_std_eeg: f64,
    pub noise_std_bold: f64,
    pub block_len_s: f64,
    pub seed: u64,
    /// Bands whose envelopes drive BOLD.
    pub driven_bands: Vec<BandName>,
    /// Relative depth of the slow envelope modulation, in `[0, 1)`.
    pub modulation_depth: f64,
    pub bold_baseline: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_channels: 8,
            sample_rate_hz: 192.0,
            duration_s: 320.0,
            tr_s: 2.0,
            map_height: 32,
            map_width: 32,
            // beta desynchronises and gamma rises during the task; the low
            // bands do not depend on state.
            band_powers_per_state: StatePowers {
                rest: [1.0, 0.8, 1.2, 1.0, 0.3],
                task: [1.0, 0.8, 1.2, 0.3, 1.0],
            },
            hrf_peak_s: 6.0,
            noise_std_eeg: 0.2,
            noise_std_bold: 0.02,
            block_len_s: 20.0,
            seed: 0,
            driven_bands: vec![BandName::Beta, BandName::Gamma],
            modulation_depth: 0.35,
            bold_baseline: 1.0,
        }
    }
}

pub(crate) fn is_multiple(value: f64, step: f64) -> bool {
    let ratio = value / step;
    (ratio - ratio.round()).abs() < 1e-9 * ratio.abs().max(1.0)
}

impl SynthConfig {
    pub fn n_frames(&self) -> usize {
        (self.duration_s / self.tr_s).round() as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.map_height == 0 || self.map_width == 0 {
            return Err(config_err("channel count and map dimensions must be positive"));
        }
        if !(self.tr_s > 0.0 && self.block_len_s > 0.0 && self.duration_s > 0.0) {
            return Err(config_err("durations must be positive"));
        }
        if !is_multiple(self.duration_s, self.tr_s) {
            return Err(config_err(format!("duration {} s is not a multiple of TR {} s", self.duration_s, self.tr_s)));
        }
        if !is_multiple(self.duration_s, self.block_len_s) {
            return Err(config_err(format!(
                "duration {} s is not a multiple of block length {} s",
                self.duration_s, self.block_len_s
            )));
        }
        let top = BandName::OSCILLATORY.iter().map(|b| b.edges().1).fold(0.0, f64::max);
        if self.sample_rate_hz < 2.0 * top {
            return Err(config_err(format!(
                "sample rate {} Hz below Nyquist for the {} Hz band edge",
                self.sample_rate_hz, top
            )));
        }
        if self.noise_std_eeg < 0.0 || self.noise_std_bold < 0.0 {
            return Err(config_err("noise standard deviations must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.modulation_depth) {
            return Err(config_err("modulation depth must lie in [0, 1)"));
        }
        if self.hrf_peak_s <= 0.0 {
            return Err(config_err("HRF peak must be positive"));
        }
        Ok(())
    }
}

/// A synthetic simultaneous recording.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSession {
    pub eeg: EegRecording,
    pub bold: BoldFrameSequence,
    pub frame_labels: Vec<State>,
    /// Band envelopes at the EEG sample rate, `5 × samples`.
    pub truth_envelopes: Array2<f64>,
}

/// Double-gamma hemodynamic response with its positive lobe peaking at
/// `peak_s` and a one-sixth undershoot ten seconds later.
pub fn canonical_hrf(t: f64, peak_s: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(CatdError::Domain(format!("HRF time must be non-negative, got {t}")));
    }
    if !(peak_s > 0.0) {
        return Err(CatdError::Domain(format!("HRF peak must be positive, got {peak_s}")));
    }
    Ok(hrf_unchecked(t, peak_s))
}

fn gamma_pdf(t: f64, shape: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t - ln_gamma(shape)).exp()
}

fn hrf_unchecked(t: f64, peak_s: f64) -> f64 {
    let shape = peak_s + 1.0;
    gamma_pdf(t, shape) - gamma_pdf(t, shape + 10.0) / 6.0
}

/// One label per frame, alternating rest/task blocks starting with rest.
pub fn block_schedule(duration_s: f64, block_len_s: f64, tr_s: f64) -> Result<Vec<State>> {
    if !(block_len_s > 0.0 && tr_s > 0.0) || !is_multiple(duration_s, block_len_s) {
        return Err(config_err(format!(
            "duration {duration_s} s is not a whole number of {block_len_s} s blocks"
        )));
    }
    if !is_multiple(duration_s, tr_s) {
        return Err(config_err(format!("duration {duration_s} s is not a multiple of TR {tr_s} s")));
    }
    let frames = (duration_s / tr_s).round() as usize;
    Ok((0..frames).map(|k| state_at(k as f64 * tr_s, block_len_s)).collect())
}

fn state_at(t: f64, block_len_s: f64) -> State {
    // Negative times belong to the leading rest period.
    if t < 0.0 {
        return State::Rest;
    }
    // Nudge so that onsets landing exactly on a block boundary are not split
    // by rounding.
    let block = ((t + 1e-9) / block_len_s).floor() as usize;
    if block % 2 == 0 {
        State::Rest
    } else {
        State::Task
    }
}

/// Spatial weight of a band's blob at a grid cell. The layout depends only
/// on the map size, so sessions with different seeds share it.
pub fn spatial_weight(band: BandName, row: usize, col: usize, height: usize, width: usize) -> f64 {
    let (cy, cx) = match band {
        BandName::Delta => (0.2, 0.8),
        BandName::Theta => (0.8, 0.2),
        BandName::Alpha => (0.5, 0.5),
        BandName::Beta => (0.28, 0.28),
        BandName::Gamma => (0.72, 0.72),
        BandName::Full => return 0.0,
    };
    let sigma = 0.12 * height.min(width) as f64;
    let dy = row as f64 + 0.5 - cy * height as f64;
    let dx = col as f64 + 0.5 - cx * width as f64;
    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
}

/// Cells where `band`'s weight is at least `threshold` and every other
/// driven band's weight is below a tenth of it, row-major order.
pub fn driven_cells(cfg: &SynthConfig, band: BandName, threshold: f64) -> Vec<(usize, usize)> {
    let (h, w) = (cfg.map_height, cfg.map_width);
    let mut cells = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let own = spatial_weight(band, r, c, h, w);
            let others = cfg
                .driven_bands
                .iter()
                .filter(|&&b| b != band)
                .map(|&b| spatial_weight(b, r, c, h, w))
                .fold(0.0, f64::max);
            if own >= threshold && others < 0.1 * own {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Slow modulation as a sum of four random low-frequency sinusoids.
struct Modulation {
    terms: Vec<(f64, f64, f64)>,
}

impl Modulation {
    fn draw(rng: &mut impl Rng) -> Self {
        let terms = (0..4)
            .map(|_| {
                let freq = rng.random_range(0.01..0.06);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.0);
                (freq, phase, amp)
            })
            .collect::<Vec<_>>();
        Modulation { terms }
    }

    /// Value in `[-1, 1]`.
    fn at(&self, t: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|(_, _, a)| a).sum();
        self.terms.iter().map(|(f, p, a)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>() / total
    }
}

struct EnvelopeModel<'a> {
    cfg: &'a SynthConfig,
    modulations: Vec<Modulation>,
}

impl EnvelopeModel<'_> {
    fn at(&self, band: usize, t: f64) -> f64 {
        let level = self.cfg.band_powers_per_state.level(state_at(t, self.cfg.block_len_s), band);
        let depth = if self.cfg.driven_bands.contains(&BandName::OSCILLATORY[band]) {
            self.cfg.modulation_depth
        } else {
            0.0
        };
        level * (1.0 + depth * self.modulations[band].at(t))
    }
}

const HRF_SUPPORT_S: f64 = 32.0;
const HRF_STEP_S: f64 = 0.05;

/// Synthesises one session. A pure function of `cfg`.
pub fn generate_paired_session(cfg: &SynthConfig) -> Result<PairedSession> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let n_bands = BandName::OSCILLATORY.len();
    let modulations = (0..n_bands).map(|_| Modulation::draw(&mut rng)).collect();
    let env = EnvelopeModel { cfg, modulations };

    let n_samples = cfg.n_samples();
    let fs = cfg.sample_rate_hz;
    let mut truth = Array2::zeros((n_bands, n_samples));
    for b in 0..n_bands {
        for i in 0..n_samples {
            truth[[b, i]] = env.at(b, i as f64 / fs);
        }
    }

    let mut samples = Array2::zeros((cfg.n_channels, n_samples));
    for ch in 0..cfg.n_channels {
        for (b, band) in BandName::OSCILLATORY.iter().enumerate() {
            let gain: f64 = rng.random_range(0.5..1.5);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let omega = 2.0 * PI * band.center_hz();
            for i in 0..n_samples {
                let t = i as f64 / fs;
                samples[[ch, i]] += gain * truth[[b, i]] * (omega * t + phase).sin();
            }
        }
    }
    if cfg.noise_std_eeg > 0.0 {
        for v in samples.iter_mut() {
            *v += cfg.noise_std_eeg * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let frame_labels = block_schedule(cfg.duration_s, cfg.block_len_s, cfg.tr_s)?;
    let n_frames = frame_labels.len();
    let (h, w) = (cfg.map_height, cfg.map_width);
    let hrf_taps: Vec<f64> = (0..(HRF_SUPPORT_S / HRF_STEP_S) as usize)
        .map(|j| hrf_unchecked(j as f64 * HRF_STEP_S, cfg.hrf_peak_s) * HRF_STEP_S)
        .collect();

    let mut frames = Array3::from_elem((n_frames, h, w), cfg.bold_baseline);
    for &band in &cfg.driven_bands {
        let Some(b) = band.index() else { continue };
        let weights = Array2::from_shape_fn((h, w), |(r, c)| spatial_weight(band, r, c, h, w));
        for k in 0..n_frames {
            let onset = k as f64 * cfg.tr_s;
            let drive: f64 = hrf_taps
                .iter()
                .enumerate()
                .map(|(j, tap)| tap * env.at(b, onset - j as f64 * HRF_STEP_S))
                .sum();
            let mut frame = frames.index_axis_mut(ndarray::Axis(0), k);
            frame.scaled_add(drive, &weights);
        }
    }
    if cfg.noise_std_bold > 0.0 {
        for v in frames.iter_mut() {
            *v += cfg.noise_std_bold * rng.sample::<f64, _>(StandardNormal);
        }
    }

    Ok(PairedSession {
        eeg: EegRecording::new(samples, fs, 0.0)?,
        bold: BoldFrameSequence::new(frames, cfg.tr_s, 0.0)?,
        frame_labels,
        truth_envelopes: truth,
    })
}
