use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CatdError, Result};

/// Named EEG frequency band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
    Full,
}

impl BandName {
    /// The five oscillatory bands, lowest first.
    pub const OSCILLATORY: [BandName; 5] =
        [BandName::Delta, BandName::Theta, BandName::Alpha, BandName::Beta, BandName::Gamma];

    /// Every band accepted on the command line, in ablation order.
    pub const ALL: [BandName; 6] = [
        BandName::Delta,
        BandName::Theta,
        BandName::Alpha,
        BandName::Beta,
        BandName::Gamma,
        BandName::Full,
    ];

    /// Conventional edges in Hz. `Full` spans the union of the others.
    pub fn edges(self) -> (f64, f64) {
        match self {
            BandName::Delta => (0.5, 4.0),
            BandName::Theta => (4.0, 8.0),
            BandName::Alpha => (8.0, 13.0),
            BandName::Beta => (13.0, 30.0),
            BandName::Gamma => (30.0, 50.0),
            BandName::Full => (0.0, 50.0),
        }
    }

    /// Oscillation frequency used by the synthetic generator.
    pub fn center_hz(self) -> f64 {
        match self {
            BandName::Delta => 2.0,
            BandName::Theta => 6.0,
            BandName::Alpha => 10.0,
            BandName::Beta => 20.0,
            BandName::Gamma => 40.0,
            BandName::Full => 10.0,
        }
    }

    /// Position within [`BandName::OSCILLATORY`].
    pub fn index(self) -> Option<usize> {
        BandName::OSCILLATORY.iter().position(|&b| b == self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
            BandName::Full => "full",
        }
    }

    pub fn spec(self) -> BandSpec {
        let (lo_hz, hi_hz) = self.edges();
        BandSpec { name: self, lo_hz, hi_hz }
    }
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandName {
    type Err = CatdError;

    fn from_str(s: &str) -> Result<Self> {
        BandName::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown band `{s}` (expected delta|theta|alpha|beta|gamma|full)")))
    }
}

/// A pass band. `lo_hz == 0` denotes a low-pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: BandName,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl BandSpec {
    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let nyquist = sample_rate_hz / 2.0;
        if !(self.lo_hz >= 0.0 && self.lo_hz < self.hi_hz && self.hi_hz < nyquist) {
            return Err(config_err(format!(
                "band {} [{}, {}] Hz invalid for Nyquist {} Hz",
                self.name, self.lo_hz, self.hi_hz, nyquist
            )));
        }
        Ok(())
    }
}
