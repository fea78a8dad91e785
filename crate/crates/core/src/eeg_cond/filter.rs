//! Zero-phase Butterworth filtering.
//!
//! Band-pass filters are designed from a fourth-order analog Butterworth
//! prototype via the low-pass to band-pass transform and the bilinear
//! transform with pre-warped edges, giving four second-order sections. A
//! band whose lower edge is zero becomes a fourth-order low-pass (two
//! sections). Filtering runs forward then backward, which squares the
//! magnitude response and cancels the phase.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::{BandSpec, EegRecording};
use crate::error::Result;

const PROTOTYPE_ORDER: usize = 4;

/// One second-order section, `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = 1.0 + self.a[0] * zi + self.a[1] * zi * zi;
        num / den
    }

    fn run(&self, signal: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for x in signal.iter_mut() {
            let y = self.b[0] * *x + s1;
            s1 = self.b[1] * *x - self.a[0] * y + s2;
            s2 = self.b[2] * *x - self.a[1] * y;
            *x = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

fn prototype_poles_upper() -> Vec<Complex64> {
    (0..PROTOTYPE_ORDER)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + PROTOTYPE_ORDER + 1) as f64 / (2 * PROTOTYPE_ORDER) as f64))
        .filter(|p| p.im > 0.0)
        .collect()
}

fn section_from_pole(zp: Complex64, b: [f64; 3]) -> Biquad {
    Biquad { b, a: [-2.0 * zp.re, zp.norm_sqr()] }
}

impl SosFilter {
    pub fn design(band: &BandSpec, fs: f64) -> Result<Self> {
        band.validate(fs)?;
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let mut sections = Vec::new();
        if band.lo_hz == 0.0 {
            let wc = warp(band.hi_hz);
            for p in prototype_poles_upper() {
                let mut sec = section_from_pole(bilinear(p * wc, fs), [1.0, 2.0, 1.0]);
                let dc = sec.response(Complex64::new(1.0, 0.0)).norm();
                sec.b.iter_mut().for_each(|v| *v /= dc);
                sections.push(sec);
            }
        } else {
            let (wl, wh) = (warp(band.lo_hz), warp(band.hi_hz));
            let w0 = (wl * wh).sqrt();
            let bw = wh - wl;
            let center = Complex64::from_polar(1.0, 2.0 * (w0 / (2.0 * fs)).atan());
            for p in prototype_poles_upper() {
                let pb = p * bw;
                let disc = (pb * pb - 4.0 * w0 * w0).sqrt();
                for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
                    let mut sec = section_from_pole(bilinear(s, fs), [1.0, 0.0, -1.0]);
                    let g = sec.response(center).norm();
                    sec.b.iter_mut().for_each(|v| *v /= g);
                    sections.push(sec);
                }
            }
        }
        Ok(SosFilter { sections })
    }

    /// Magnitude response of a single forward pass at `freq_hz`.
    pub fn gain(&self, freq_hz: f64, fs: f64) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / fs);
        self.sections.iter().map(|s| s.response(z)).product::<Complex64>().norm()
    }

    fn run(&self, signal: &mut [f64]) {
        for sec in &self.sections {
            sec.run(signal);
        }
    }

    /// Forward-backward filtering with odd-reflection padding at both ends.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase band-pass (or low-pass) of every channel.
pub fn bandpass_filter(rec: &EegRecording, band: &BandSpec) -> Result<EegRecording> {
    let fs = rec.sample_rate_hz;
    let filter = SosFilter::design(band, fs)?;
    // Three periods of the lowest edge cover the slowest transient.
    let pad = if band.lo_hz > 0.0 { (3.0 * fs / band.lo_hz).ceil() as usize } else { (3.0 * fs / band.hi_hz).ceil() as usize };
    let mut out = Array2::zeros(rec.samples.dim());
    for (src, mut dst) in rec.samples.rows().into_iter().zip(out.rows_mut()) {
        let filtered = filter.filtfilt(&src.to_vec(), pad);
        dst.iter_mut().zip(filtered).for_each(|(d, v)| *d = v);
    }
    EegRecording::new(out, fs, rec.t0_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eeg_cond::BandName;

    fn sine(freq: f64, fs: f64, seconds: f64) -> EegRecording {
        let n = (fs * seconds) as usize;
        let x = Array2::from_shape_fn((1, n), |(_, i)| (2.0 * PI * freq * i as f64 / fs).sin());
        EegRecording::new(x, fs, 0.0).unwrap()
    }

    fn rms_ratio(input: &EegRecording, output: &EegRecording) -> f64 {
        // Ignore two seconds at each edge.
        let n = input.samples.ncols();
        let m = (2.0 * input.sample_rate_hz) as usize;
        let r = |e: &EegRecording| {
            let s = e.samples.slice(ndarray::s![0, m..n - m]);
            (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
        };
        r(output) / r(input)
    }

    #[test]
    fn zero_in_zero_out() {
        let rec = EegRecording::new(Array2::zeros((2, 512)), 128.0, 0.0).unwrap();
        let out = bandpass_filter(&rec, &BandName::Beta.spec()).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_rejects_alpha_and_passes_beta() {
        let fs = 128.0;
        let alpha = sine(10.0, fs, 20.0);
        let beta = sine(20.0, fs, 20.0);
        let band = BandName::Beta.spec();
        assert!(rms_ratio(&alpha, &bandpass_filter(&alpha, &band).unwrap()) < 0.1);
        assert!(rms_ratio(&beta, &bandpass_filter(&beta, &band).unwrap()) > 0.7);
    }

    #[test]
    fn octave_attenuation_and_passband_ripple() {
        let fs = 128.0;
        for name in [BandName::Delta, BandName::Theta, BandName::Alpha, BandName::Beta] {
            let band = name.spec();
            let f = SosFilter::design(&band, fs).unwrap();
            // forward-backward squares the single-pass gain
            let db = |hz: f64| 20.0 * (f.gain(hz, fs).powi(2)).log10();
            assert!(db(band.lo_hz / 2.0) <= -20.0, "{name} low octave {}", db(band.lo_hz / 2.0));
            if 2.0 * band.hi_hz < fs / 2.0 {
                assert!(db(2.0 * band.hi_hz) <= -20.0, "{name} high octave");
            }
            let centre = (band.lo_hz * band.hi_hz).sqrt();
            assert!(db(centre) >= -3.0, "{name} centre {}", db(centre));
        }
    }

    #[test]
    fn lowpass_full_band() {
        let fs = 192.0;
        let f = SosFilter::design(&BandName::Full.spec(), fs).unwrap();
        assert!((f.gain(1e-3, fs) - 1.0).abs() < 1e-9);
        assert!(f.gain(90.0, fs) < 0.05);
    }

    #[test]
    fn zero_phase_keeps_burst_centre() {
        let fs = 128.0;
        let n = 2048;
        let c = 1000.0;
        let x = Array2::from_shape_fn((1, n), |(_, i)| {
            let t = (i as f64 - c) / fs;
            (-t * t / (2.0 * 0.3 * 0.3)).exp() * (2.0 * PI * 20.0 * t).cos()
        });
        let rec = EegRecording::new(x, fs, 0.0).unwrap();
        let out = bandpass_filter(&rec, &BandName::Beta.spec()).unwrap();
        let argmax = |e: &EegRecording| {
            e.samples.row(0).iter().enumerate().fold((0, 0.0), |a, (i, &v)| if v.abs() > a.1 { (i, v.abs()) } else { a }).0
        };
        assert!((argmax(&out) as i64 - c as i64).abs() <= 1);
    }

    #[test]
    fn refiltering_keeps_inband_power() {
        let fs = 128.0;
        let x = sine(20.0, fs, 20.0);
        let band = BandName::Beta.spec();
        let once = bandpass_filter(&x, &band).unwrap();
        let twice = bandpass_filter(&once, &band).unwrap();
        let db = 20.0 * rms_ratio(&once, &twice).log10();
        assert!(db.abs() < 3.0, "{db} dB");
    }

    #[test]
    fn band_above_nyquist_is_config_error() {
        let x = sine(10.0, 64.0, 4.0);
        assert!(bandpass_filter(&x, &BandName::Gamma.spec()).is_err());
    }
}
