use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bold_latent::{VaeConfig, VaeHyper};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{SamplerConfig, ScheduleConfig, TrainHyper};
use crate::eeg_cond::{BandName, StftConfig, POOLED_BANDS};
use crate::error::{config_err, Result};
use crate::metrics::ClassifierConfig;
use crate::synthgen::SynthConfig;

pub const SEED_ENV: &str = "CATD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtfsConfig {
    pub window_s: f64,
    /// Defaults to the TR when absent.
    pub stride_s: Option<f64>,
    pub band: BandName,
    /// STFT frame and hop in samples; default one second and half of it.
    pub frame_len: Option<usize>,
    pub hop: Option<usize>,
}

impl Default for DtfsConfig {
    fn default() -> Self {
        DtfsConfig { window_s: 6.0, stride_s: None, band: BandName::Full, frame_len: None, hop: None }
    }
}

impl DtfsConfig {
    pub fn stft(&self, fs: f64) -> StftConfig {
        let base = StftConfig::for_rate(fs);
        StftConfig { frame_len: self.frame_len.unwrap_or(base.frame_len), hop: self.hop.unwrap_or(base.hop), ..base }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_sessions: usize,
    pub test_sessions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_sessions: 3, test_sessions: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub dtfs: DtfsConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeHyper,
    pub patch_size: usize,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainHyper,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            dtfs: DtfsConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeHyper::default(),
            patch_size: 2,
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainHyper::default(),
            sampler: SamplerConfig::default(),
            classifier: ClassifierConfig::default(),
            output_dir: PathBuf::from("catd-out"),
        }
    }
}

/// Stage labels mixed into the master seed.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Vae,
    Denoiser,
    Train,
    Sampler,
    Classifier,
    Baseline,
}

/// Seed of synthetic session `index` (training sessions first).
pub fn session_seed(master: u64, index: usize) -> u64 {
    splitmix(master.wrapping_mul(1_000_003).wrapping_add(index as u64))
}

pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    splitmix(master ^ (0xA5A5_0000 + stage as u64))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parses a `--set` value: JSON when it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key.path=value` to a JSON document, creating objects as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` has an empty segment")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{part}` is not an object")))?;
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let obj = node.as_object_mut().ok_or_else(|| config_err(format!("override `{key}` targets a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Merges `overlay` into `base`, recursing through objects.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Builds a configuration from an optional JSON document, dotted
    /// overrides and an optional seed override. Unknown keys are rejected.
    pub fn resolve(doc: Option<Value>, overrides: &[String], seed_env: Option<&str>) -> Result<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(doc) = doc {
            if !doc.is_object() {
                return Err(config_err("configuration must be a JSON object"));
            }
            merge(&mut value, doc);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(s) = seed_env {
            let seed: u64 = s.trim().parse().map_err(|_| config_err(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            value["seed"] = Value::from(seed);
        }
        reject_unknown(&value, &serde_json::to_value(ExperimentConfig::default())?, "")?;
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(Some(doc), overrides, env.as_deref())
    }

    pub fn latent_token_shape(&self) -> (usize, usize) {
        let (lh, lw, lc) = self.vae.latent_dims();
        let p = self.patch_size.max(1);
        ((lh / p) * (lw / p), p * p * lc)
    }

    pub fn stride_s(&self) -> f64 {
        self.dtfs.stride_s.unwrap_or(self.synth.tr_s)
    }

    /// Cross-module consistency, checked before any computation.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.vae.validate()?;
        self.denoiser.validate()?;
        self.schedule.build()?;
        self.sampler.validate()?;
        if (self.vae.map_height, self.vae.map_width) != (self.synth.map_height, self.synth.map_width) {
            return Err(config_err("VAE map size differs from the synthetic map"));
        }
        let (lh, lw, _) = self.vae.latent_dims();
        if self.patch_size == 0 || lh % self.patch_size != 0 || lw % self.patch_size != 0 {
            return Err(config_err(format!("latent {lh}×{lw} is not divisible by patch {}", self.patch_size)));
        }
        let (n, w) = self.latent_token_shape();
        if (self.denoiser.token_count, self.denoiser.token_width) != (n, w) {
            return Err(config_err(format!(
                "denoiser expects {}×{} tokens but the latent gives {n}×{w}; EEG token count must match",
                self.denoiser.token_count, self.denoiser.token_width
            )));
        }
        if self.denoiser.cond_features != self.synth.n_channels * POOLED_BANDS {
            return Err(config_err(format!(
                "denoiser takes {} condition features but {} channels give {}",
                self.denoiser.cond_features,
                self.synth.n_channels,
                self.synth.n_channels * POOLED_BANDS
            )));
        }
        if self.schedule.timesteps > self.denoiser.max_timestep {
            return Err(config_err("schedule has more steps than the denoiser accepts"));
        }
        let fs = self.synth.sample_rate_hz;
        self.dtfs.band.spec().validate(fs)?;
        let window = self.dtfs.window_s * fs;
        if (window - window.round()).abs() > 1e-9 || self.dtfs.window_s <= 0.0 {
            return Err(config_err("EEG window is not a whole number of samples"));
        }
        let stft = self.dtfs.stft(fs);
        if stft.frame_len == 0 || stft.hop == 0 || stft.hop > stft.frame_len || stft.frame_len > window.round() as usize {
            return Err(config_err("STFT frame/hop do not fit the EEG window"));
        }
        let stride = self.stride_s() * fs;
        if self.stride_s() <= 0.0 || (stride - stride.round()).abs() > 1e-9 {
            return Err(config_err(format!("stride {} s is not a whole number of samples at {fs} Hz", self.stride_s())));
        }
        let hires_stride = self.synth.tr_s / self.sampler.constraint.group as f64 * fs;
        if (hires_stride - hires_stride.round()).abs() > 1e-6 {
            return Err(config_err(format!(
                "TR / {} is not a whole number of samples at {fs} Hz",
                self.sampler.constraint.group
            )));
        }
        if self.dtfs.window_s >= self.synth.duration_s {
            return Err(config_err("session is shorter than one EEG window"));
        }
        if self.data.train_sessions == 0 || self.data.test_sessions == 0 {
            return Err(config_err("need at least one training and one test session"));
        }
        if self.classifier.folds < 2 {
            return Err(config_err("classification needs at least 2 folds"));
        }
        Ok(())
    }
}

fn reject_unknown(value: &Value, reference: &Value, path: &str) -> Result<()> {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        for (k, child) in v {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                None => return Err(config_err(format!("unknown configuration key `{here}`"))),
                Some(rc) => reject_unknown(child, rc, &here)?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_consistent() {
        ExperimentConfig::default().validate().unwrap();
        assert_eq!(ExperimentConfig::default().latent_token_shape(), (16, 16));
    }

    #[test]
    fn dotted_overrides_and_seed() {
        let cfg = ExperimentConfig::resolve(
            Some(json!({"train": {"steps": 7}})),
            &["train.lr=0.01".into(), "dtfs.band=beta".into(), "output_dir=/tmp/x".into()],
            Some("42"),
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.dtfs.band, BandName::Beta);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn token_mismatch_fails_validation() {
        let r = ExperimentConfig::resolve(None, &["denoiser.token_count=8".into()], None);
        assert!(matches!(r, Err(crate::CatdError::Config(_))));
        let r = ExperimentConfig::resolve(None, &["patch_size=4".into()], None);
        assert!(r.is_err());
    }

    #[test]
    fn unknown_keys_and_bad_seed_are_rejected() {
        assert!(ExperimentConfig::resolve(None, &["train.step=3".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &[], Some("minus one")).is_err());
        assert!(ExperimentConfig::resolve(None, &["novalue".into()], None).is_err());
    }

    #[test]
    fn fractional_stride_is_rejected() {
        let r = ExperimentConfig::resolve(None, &["synth.sample_rate_hz=128".into(), "dtfs.stride_s=0.6666666666666666".into()], None);
        assert!(r.is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(session_seed(0, 0), session_seed(0, 1));
        assert_ne!(session_seed(0, 0), session_seed(1, 0));
        assert_ne!(stage_seed(0, Stage::Vae), stage_seed(0, Stage::Train));
    }
}
