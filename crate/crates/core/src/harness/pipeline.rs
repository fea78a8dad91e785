//! Experiment stages behind the CLI commands. Every stage reads its inputs
//! from the output directory and writes one artifact directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{session_seed, stage_seed, ExperimentConfig, Stage};
use super::container::{load_container, read_manifest, save_container, sha256_hex, Container, NamedArray, MANIFEST};
use super::report::{collect_report, emit_report};
use crate::bold_latent::{patchify, train_vae, unpatchify, BoldFrameSequence, LatentGrid, LatentTokens, Vae, VaeHyper};
use crate::denoiser::{Conditioning, Denoiser};
use crate::diffusion::{sample, sample_superres, train, NoiseSchedule, Pair, SamplerConfig, TrainHyper, TrainState};
use crate::eeg_cond::{bandpass_filter, condition_features, slide_sample, stft_features, BandName, EegRecording};
use crate::error::{config_err, input_err, CatdError, Result};
use crate::metrics::{classify_kfold, metric_report, pearson, CVResult, MetricReport};
use crate::nn::Adam;
use crate::tape::Mat;
use crate::synthgen::{driven_cells, generate_paired_session, PairedSession, State, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Synth,
    TrainVae,
    TrainDiffusion,
    Generate,
    Superres,
    BandAblation,
    CabAblation,
    Evaluate,
    Report,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Synth,
        Command::TrainVae,
        Command::TrainDiffusion,
        Command::Generate,
        Command::Superres,
        Command::BandAblation,
        Command::CabAblation,
        Command::Evaluate,
        Command::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainVae => "train-vae",
            Command::TrainDiffusion => "train-diffusion",
            Command::Generate => "generate",
            Command::Superres => "superres",
            Command::BandAblation => "band-ablation",
            Command::CabAblation => "cab-ablation",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = CatdError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown command `{s}`")))
    }
}

/// Where each stage keeps its artifacts.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vae(&self) -> PathBuf {
        self.root.join("vae")
    }

    pub fn diffusion(&self, mode: Conditioning) -> PathBuf {
        match mode {
            Conditioning::Cab => self.root.join("diffusion"),
            Conditioning::Bypass => self.root.join("diffusion-bypass"),
        }
    }

    pub fn generate(&self) -> PathBuf {
        self.root.join("generate")
    }

    pub fn evaluate(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn superres(&self) -> PathBuf {
        self.root.join("superres")
    }

    pub fn band_ablation(&self) -> PathBuf {
        self.root.join("band-ablation")
    }

    pub fn cab_ablation(&self) -> PathBuf {
        self.root.join("cab-ablation")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub const RESULTS: &str = "results.json";

/// Identifies what produced an artifact and from which inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub catd_version: String,
    pub config: Value,
    /// Hash over the resolved config and every input manifest.
    pub input_hash: String,
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut framed = format!("blob {}\0", bytes.len()).into_bytes();
    framed.extend_from_slice(bytes);
    sha256_hex(&framed)
}

/// Tree hash in the style of a git tree: one `name blob-hash` line per input,
/// sorted by name, hashed as a blob.
pub fn content_hash(inputs: &[(String, Vec<u8>)]) -> String {
    let mut lines: Vec<String> = inputs.iter().map(|(name, bytes)| format!("{name} {}\n", blob_hash(bytes))).collect();
    lines.sort();
    blob_hash(lines.concat().as_bytes())
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig, command: Command, inputs: &[&Path]) -> Result<Self> {
        let config = serde_json::to_value(cfg)?;
        let mut hashed = vec![("config".to_string(), serde_json::to_vec(&config)?)];
        for dir in inputs {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            hashed.push((name, fs::read(dir.join(MANIFEST))?));
        }
        Ok(Provenance {
            command: command.as_str().into(),
            catd_version: env!("CARGO_PKG_VERSION").into(),
            config,
            input_hash: content_hash(&hashed),
        })
    }
}

fn require(dir: &Path, producer: Command) -> Result<()> {
    if dir.join(MANIFEST).is_file() {
        return Ok(());
    }
    Err(CatdError::MissingPrerequisite(format!(
        "{} not found; run `catd {producer}` first",
        dir.join(MANIFEST).display()
    )))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn typed<D: ndarray::Dimension>(c: &Container, name: &str) -> Result<ndarray::Array<f64, D>> {
    c.get(name)?.clone().into_dimensionality::<D>().map_err(|e| CatdError::CorruptContainer {
        array: name.to_string(),
        reason: format!("unexpected rank: {e}"),
    })
}

fn dyn_of<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ArrayD<f64> {
    a.into_dyn()
}

impl ExperimentConfig {
    pub fn seed_for(&self, stage: Stage) -> u64 {
        let offset = match stage {
            Stage::Vae => self.vae_train.seed,
            Stage::Train => self.train.seed,
            Stage::Sampler => self.sampler.seed,
            Stage::Classifier => self.classifier.seed,
            Stage::Denoiser | Stage::Baseline => 0,
        };
        stage_seed(self.seed, stage).wrapping_add(offset)
    }

    /// Session configs: training sessions, then test sessions.
    pub fn session_configs(&self) -> Vec<SynthConfig> {
        let n = self.data.train_sessions + self.data.test_sessions;
        (0..n)
            .map(|i| SynthConfig { seed: session_seed(self.seed.wrapping_add(self.synth.seed), i), ..self.synth.clone() })
            .collect()
    }

    /// The first test session recorded at `TR / group`; same seed, so the
    /// EEG is identical to that session's.
    pub fn hires_config(&self) -> SynthConfig {
        let base = self.session_configs().swap_remove(self.data.train_sessions);
        SynthConfig { tr_s: base.tr_s / self.sampler.constraint.group as f64, ..base }
    }
}

/// A loaded dataset: training sessions, test sessions and the hidden
/// high-rate recording.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PairedSession>,
    pub test: Vec<PairedSession>,
    pub hires: PairedSession,
}

fn session_arrays(prefix: &str, s: &PairedSession) -> Vec<NamedArray> {
    let labels = Array1::from_iter(s.frame_labels.iter().map(|l| l.as_f64()));
    vec![
        NamedArray::f32(format!("{prefix}.eeg"), dyn_of(s.eeg.samples.clone())),
        NamedArray::f32(format!("{prefix}.bold"), dyn_of(s.bold.frames.clone())),
        NamedArray::f32(format!("{prefix}.labels"), dyn_of(labels)),
    ]
}

fn session_from(c: &Container, prefix: &str, cfg: &SynthConfig) -> Result<PairedSession> {
    let eeg = typed::<Ix2>(c, &format!("{prefix}.eeg"))?;
    let bold = typed::<Ix3>(c, &format!("{prefix}.bold"))?;
    let labels = typed::<Ix1>(c, &format!("{prefix}.labels"))?;
    if labels.len() != bold.dim().0 || eeg.nrows() != cfg.n_channels {
        return Err(CatdError::CorruptContainer {
            array: format!("{prefix}.labels"),
            reason: "session arrays disagree with the configuration".into(),
        });
    }
    Ok(PairedSession {
        eeg: EegRecording::new(eeg, cfg.sample_rate_hz, 0.0)?,
        bold: BoldFrameSequence::new(bold, cfg.tr_s, 0.0)?,
        frame_labels: labels.iter().map(|&v| if v > 0.5 { State::Task } else { State::Rest }).collect(),
        truth_envelopes: Array2::zeros((0, 0)),
    })
}

pub fn load_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    require(&layout.data(), Command::Synth)?;
    let c = load_container(&layout.data())?;
    let configs = cfg.session_configs();
    let mut sessions = configs
        .iter()
        .enumerate()
        .map(|(i, sc)| session_from(&c, &format!("session{i}"), sc))
        .collect::<Result<Vec<_>>>()?;
    let test = sessions.split_off(cfg.data.train_sessions);
    let hires = session_from(&c, "hires", &cfg.hires_config())?;
    Ok(Dataset { train: sessions, test, hires })
}

/// Condition features of every sliding window of `eeg`, after filtering to `band`.
pub fn window_features(cfg: &ExperimentConfig, eeg: &EegRecording, band: BandName, stride_s: f64) -> Result<Vec<Mat>> {
    let filtered = bandpass_filter(eeg, &band.spec())?;
    let windows = slide_sample(&filtered, cfg.dtfs.window_s, stride_s)?;
    let stft = cfg.dtfs.stft(eeg.sample_rate_hz);
    windows
        .iter()
        .map(|w| condition_features(&stft_features(w, &stft)?, cfg.denoiser.token_count))
        .collect()
}

/// `(frame, window)` pairs: frame `k` takes the window ending at its onset.
/// Frames earlier than one full window are excluded.
pub fn pair_frames(n_frames: usize, tr_s: f64, window_s: f64, stride_s: f64, n_windows: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for k in 0..n_frames {
        let start = k as f64 * tr_s - window_s;
        if start < -1e-9 {
            continue;
        }
        let w = start / stride_s;
        if (w - w.round()).abs() > 1e-6 {
            return Err(config_err(format!("frame onset {} s does not fall on a window boundary", k as f64 * tr_s)));
        }
        let w = w.round() as usize;
        if w < n_windows {
            out.push((k, w));
        }
    }
    Ok(out)
}

/// Paired, session-standardised frames with their condition features.
#[derive(Clone, Debug)]
pub struct PairedFrames {
    pub frames: Array3<f64>,
    pub features: Vec<Mat>,
    pub labels: Vec<bool>,
}

fn standardize(bold: &BoldFrameSequence) -> BoldFrameSequence {
    let (mean, std) = bold.moments();
    bold.standardized(mean, if std > 0.0 { std } else { 1.0 })
}

pub fn paired_frames(cfg: &ExperimentConfig, sessions: &[PairedSession], band: BandName) -> Result<PairedFrames> {
    let mut frames = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for s in sessions {
        let bold = standardize(&s.bold);
        let feats = window_features(cfg, &s.eeg, band, cfg.stride_s())?;
        for (k, w) in pair_frames(bold.len(), bold.tr_s, cfg.dtfs.window_s, cfg.stride_s(), feats.len())? {
            frames.push(bold.frame(k));
            features.push(feats[w].clone());
            labels.push(s.frame_labels[k] == State::Task);
        }
    }
    if frames.is_empty() {
        return Err(input_err("no frame has a complete EEG window"));
    }
    Ok(PairedFrames { frames: stack(&frames), features, labels })
}

fn stack(frames: &[Array2<f64>]) -> Array3<f64> {
    let (h, w) = frames[0].dim();
    let mut out = Array3::zeros((frames.len(), h, w));
    for (k, f) in frames.iter().enumerate() {
        out.index_axis_mut(Axis(0), k).assign(f);
    }
    out
}

fn unstack(frames: &Array3<f64>) -> Vec<Array2<f64>> {
    frames.outer_iter().map(|f| f.to_owned()).collect()
}

const CODEC_CHUNK: usize = 64;

/// Scaled posterior means as denoiser tokens.
pub fn encode_tokens(vae: &Vae, frames: &[Array2<f64>], patch: usize) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(CODEC_CHUNK) {
        let refs: Vec<&Array2<f64>> = chunk.iter().collect();
        for (mean, _) in vae.encode_batch(&refs)? {
            let grid = LatentGrid { values: mean.values * vae.latent_scale };
            out.push(patchify(&grid, patch)?.tokens);
        }
    }
    Ok(out)
}

pub fn decode_tokens(vae: &Vae, tokens: &[Mat], patch: usize) -> Result<Array3<f64>> {
    if tokens.is_empty() {
        return Err(input_err("nothing to decode"));
    }
    let (lh, lw, lc) = vae.config.latent_dims();
    let mut frames = Vec::with_capacity(tokens.len());
    for chunk in tokens.chunks(CODEC_CHUNK) {
        let grids = chunk
            .iter()
            .map(|t| unpatchify(&LatentTokens { tokens: t / vae.latent_scale, patch_size: patch, grid: (lh, lw, lc) }))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LatentGrid> = grids.iter().collect();
        frames.extend(vae.decode_batch(&refs)?);
    }
    Ok(stack(&frames))
}

fn params_arrays(prefix: &str, params: &crate::nn::ParamSet) -> Vec<NamedArray> {
    params.iter().map(|(n, m)| NamedArray::f64(format!("{prefix}{n}"), dyn_of(m.clone()))).collect()
}

fn mats_by_name(c: &Container, prefix: &str) -> Result<HashMap<String, Mat>> {
    let mut out = HashMap::new();
    for name in c.arrays.keys() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest.to_string(), typed::<Ix2>(c, name)?);
        }
    }
    Ok(out)
}

fn scalar(c: &Container, name: &str) -> Result<f64> {
    let a = typed::<Ix1>(c, name)?;
    a.first().copied().ok_or_else(|| CatdError::CorruptContainer { array: name.into(), reason: "empty".into() })
}

pub fn load_vae(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vae> {
    require(&layout.vae(), Command::TrainVae)?;
    let c = load_container(&layout.vae())?;
    let mut vae = Vae::new(cfg.vae.clone(), 0)?;
    let params = mats_by_name(&c, "param.")?;
    vae.params.load_from(|n| params.get(n))?;
    vae.latent_scale = scalar(&c, "latent_scale")?;
    Ok(vae)
}

fn normalized_frames(sessions: &[PairedSession]) -> Vec<Array2<f64>> {
    sessions.iter().flat_map(|s| unstack(&standardize(&s.bold).frames)).collect()
}

/// Diffusion checkpoint contents beyond the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    provenance: Provenance,
    conditioning: Conditioning,
    step: usize,
    seed: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_clip_norm: Option<f64>,
    adam_steps: u64,
    /// Word position of the batch stream; a string because it is 128-bit.
    stream_position: String,
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
}

pub fn save_checkpoint(dir: &Path, model: &Denoiser, state: &TrainState, sched: &NoiseSchedule, cfg: &ExperimentConfig, provenance: Provenance) -> Result<()> {
    let mut arrays = params_arrays("param.", &model.params);
    for ((name, _), (m, v)) in model.params.iter().zip(state.optimizer.first.iter().zip(&state.optimizer.second)) {
        arrays.push(NamedArray::f64(format!("adam.m.{name}"), dyn_of(m.clone())));
        arrays.push(NamedArray::f64(format!("adam.v.{name}"), dyn_of(v.clone())));
    }
    arrays.push(NamedArray::f64("feature_scale", dyn_of(model.feature_scale.clone())));
    arrays.push(NamedArray::f64("loss_history", dyn_of(Array1::from(state.loss_history.clone()))));
    arrays.push(NamedArray::f64("schedule.beta", dyn_of(Array1::from(sched.beta.clone()))));
    arrays.push(NamedArray::f64("schedule.alpha_bar", dyn_of(Array1::from(sched.alpha_bar.clone()))));
    let opt = &state.optimizer;
    let meta = CheckpointMeta {
        provenance,
        conditioning: model.config.conditioning,
        step: state.step,
        seed: state.seed,
        adam_lr: opt.lr,
        adam_beta1: opt.beta1,
        adam_beta2: opt.beta2,
        adam_eps: opt.eps,
        adam_clip_norm: opt.clip_norm,
        adam_steps: opt.steps,
        stream_position: state.stream_position().to_string(),
        timesteps: cfg.schedule.timesteps,
        beta_start: cfg.schedule.beta_start,
        beta_end: cfg.schedule.beta_end,
    };
    save_container(dir, &arrays, serde_json::to_value(meta)?)
}

/// Restores a model and its optimisation state, ready to resume.
pub fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig, mode: Conditioning) -> Result<(Denoiser, TrainState)> {
    let producer = if mode == Conditioning::Cab { Command::TrainDiffusion } else { Command::CabAblation };
    require(dir, producer)?;
    let c = load_container(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(c.metadata.clone())
        .map_err(|e| CatdError::CorruptContainer { array: MANIFEST.into(), reason: e.to_string() })?;
    if meta.conditioning != mode {
        return Err(config_err(format!("checkpoint in {} holds a {:?} model", dir.display(), meta.conditioning)));
    }
    if (meta.timesteps, meta.beta_start, meta.beta_end) != (cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end) {
        return Err(config_err("checkpoint was trained with a different noise schedule"));
    }
    let mut model = Denoiser::new(cfg.denoiser.clone().with_conditioning(mode), 0)?;
    let params = mats_by_name(&c, "param.")?;
    model.params.load_from(|n| params.get(n))?;
    model.feature_scale = typed::<Ix1>(&c, "feature_scale")?;
    let firsts = mats_by_name(&c, "adam.m.")?;
    let seconds = mats_by_name(&c, "adam.v.")?;
    let mut first = Vec::with_capacity(model.params.len());
    let mut second = Vec::with_capacity(model.params.len());
    for (name, value) in model.params.iter() {
        let missing = || CatdError::CorruptContainer { array: format!("adam.m.{name}"), reason: "not present".into() };
        let m = firsts.get(name).ok_or_else(missing)?;
        let v = seconds.get(name).ok_or_else(missing)?;
        if m.dim() != value.dim() || v.dim() != value.dim() {
            return Err(CatdError::CorruptContainer { array: format!("adam.m.{name}"), reason: "shape mismatch".into() });
        }
        first.push(m.clone());
        second.push(v.clone());
    }
    let optimizer = Adam {
        lr: meta.adam_lr,
        beta1: meta.adam_beta1,
        beta2: meta.adam_beta2,
        eps: meta.adam_eps,
        clip_norm: meta.adam_clip_norm,
        first,
        second,
        steps: meta.adam_steps,
    };
    let pos: u128 = meta
        .stream_position
        .parse()
        .map_err(|_| CatdError::CorruptContainer { array: MANIFEST.into(), reason: "bad stream position".into() })?;
    let history = typed::<Ix1>(&c, "loss_history")?.to_vec();
    Ok((model, TrainState::restore(meta.step, meta.seed, optimizer, history, pos)))
}

fn frames_array(name: &str, frames: &Array3<f64>) -> NamedArray {
    NamedArray::f32(name, dyn_of(frames.clone()))
}

fn labels_array(labels: &[bool]) -> NamedArray {
    NamedArray::f32("labels", dyn_of(Array1::from_iter(labels.iter().map(|&l| if l { 1.0 } else { 0.0 }))))
}

/// Generated-signal scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub variant: String,
    pub metrics: MetricReport,
    pub classification: CVResult,
}

fn flatten(frames: &Array3<f64>) -> Array2<f64> {
    let (n, h, w) = frames.dim();
    frames.to_shape((n, h * w)).expect("contiguous").to_owned()
}

pub fn score(cfg: &ExperimentConfig, variant: &str, real: &Array3<f64>, generated: &Array3<f64>, labels: &[bool]) -> Result<Scored> {
    let metrics = metric_report(real, generated)?;
    let classifier = crate::metrics::ClassifierConfig { seed: cfg.seed_for(Stage::Classifier), ..cfg.classifier };
    let classification = classify_kfold(&flatten(generated), labels, &classifier)?;
    Ok(Scored { variant: variant.into(), metrics, classification })
}

fn sampler(cfg: &ExperimentConfig) -> SamplerConfig {
    SamplerConfig { seed: cfg.seed_for(Stage::Sampler), ..cfg.sampler.clone() }
}

/// Runs one CLI command to completion.
pub fn run_command(cfg: &ExperimentConfig, command: Command) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    match command {
        Command::Synth => synth(cfg, &layout),
        Command::TrainVae => train_vae_stage(cfg, &layout),
        Command::TrainDiffusion => train_diffusion(cfg, &layout, cfg.denoiser.conditioning).map(|_| ()),
        Command::Generate => generate(cfg, &layout),
        Command::Superres => superres(cfg, &layout),
        Command::BandAblation => band_ablation(cfg, &layout),
        Command::CabAblation => cab_ablation(cfg, &layout),
        Command::Evaluate => evaluate(cfg, &layout),
        Command::Report => report(cfg, &layout),
    }
}

fn synth(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let provenance = Provenance::new(cfg, Command::Synth, &[])?;
    let mut arrays = Vec::new();
    let mut seeds = Vec::new();
    for (i, sc) in cfg.session_configs().iter().enumerate() {
        arrays.extend(session_arrays(&format!("session{i}"), &generate_paired_session(sc)?));
        seeds.push(sc.seed);
    }
    let hires = cfg.hires_config();
    arrays.extend(session_arrays("hires", &generate_paired_session(&hires)?));
    let meta = json!({
        "provenance": provenance,
        "train_sessions": cfg.data.train_sessions,
        "test_sessions": cfg.data.test_sessions,
        "session_seeds": seeds,
        "sample_rate_hz": cfg.synth.sample_rate_hz,
        "tr_s": cfg.synth.tr_s,
        "hires_tr_s": hires.tr_s,
        "label_coding": "1 = task, 0 = rest",
    });
    save_container(&layout.data(), &arrays, meta)
}

fn train_vae_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let data = load_dataset(cfg, layout)?;
    let provenance = Provenance::new(cfg, Command::TrainVae, &[&layout.data()])?;
    let frames = normalized_frames(&data.train);
    let hyper = VaeHyper { seed: cfg.seed_for(Stage::Vae), ..cfg.vae_train.clone() };
    let (mut vae, history) = train_vae(&frames, cfg.vae.clone(), &hyper)?;
    // Unit-variance latents keep the diffusion prior N(0, I) on scale.
    vae.latent_scale = 1.0;
    let tokens = encode_tokens(&vae, &frames, cfg.patch_size)?;
    let n: usize = tokens.iter().map(|t| t.len()).sum();
    let mean = tokens.iter().map(|t| t.sum()).sum::<f64>() / n as f64;
    let var = tokens.iter().map(|t| t.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum::<f64>() / n as f64;
    vae.latent_scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let mut arrays = params_arrays("param.", &vae.params);
    arrays.push(NamedArray::f64("latent_scale", dyn_of(Array1::from(vec![vae.latent_scale]))));
    arrays.push(NamedArray::f64("loss_history", dyn_of(Array1::from(history))));
    save_container(&layout.vae(), &arrays, json!({ "provenance": provenance }))
}

/// Trains a denoiser from scratch on the training sessions and saves its
/// checkpoint.
pub fn train_diffusion(cfg: &ExperimentConfig, layout: &Layout, mode: Conditioning) -> Result<(Denoiser, TrainState)> {
    let data = load_dataset(cfg, layout)?;
    let vae = load_vae(cfg, layout)?;
    let command = if mode == Conditioning::Cab { Command::TrainDiffusion } else { Command::CabAblation };
    let provenance = Provenance::new(cfg, command, &[&layout.data(), &layout.vae()])?;
    let paired = paired_frames(cfg, &data.train, cfg.dtfs.band)?;
    let x0 = encode_tokens(&vae, &unstack(&paired.frames), cfg.patch_size)?;
    let pairs: Vec<Pair> = x0.into_iter().zip(paired.features).map(|(x0, features)| Pair { x0, features }).collect();
    let mut model = Denoiser::new(cfg.denoiser.clone().with_conditioning(mode), cfg.seed_for(Stage::Denoiser))?;
    model.fit_feature_scale(&pairs.iter().map(|p| &p.features).collect::<Vec<_>>());
    let sched = cfg.schedule.build()?;
    let hyper = TrainHyper { seed: cfg.seed_for(Stage::Train), ..cfg.train.clone() };
    let state = train(&mut model, &pairs, &sched, &hyper)?;
    save_checkpoint(&layout.diffusion(mode), &model, &state, &sched, cfg, provenance)?;
    Ok((model, state))
}

fn generate_frames(cfg: &ExperimentConfig, model: &Denoiser, vae: &Vae, features: &[Mat]) -> Result<Array3<f64>> {
    let sched = cfg.schedule.build()?;
    let tokens = sample(model, features, &sched, &sampler(cfg))?;
    decode_tokens(vae, &tokens, cfg.patch_size)
}

fn generate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let data = load_dataset(cfg, layout)?;
    let vae = load_vae(cfg, layout)?;
    let mode = cfg.denoiser.conditioning;
    let (model, _) = load_checkpoint(&layout.diffusion(mode), cfg, mode)?;
    let provenance = Provenance::new(cfg, Command::Generate, &[&layout.data(), &layout.vae(), &layout.diffusion(mode)])?;
    let test = paired_frames(cfg, &data.test, cfg.dtfs.band)?;
    let generated = generate_frames(cfg, &model, &vae, &test.features)?;
    // Same architecture and feature scale, parameters never trained.
    let mut untrained = Denoiser::new(model.config.clone(), cfg.seed_for(Stage::Baseline))?;
    untrained.feature_scale = model.feature_scale.clone();
    let baseline = generate_frames(cfg, &untrained, &vae, &test.features)?;
    let arrays = vec![
        frames_array("real", &test.frames),
        frames_array("generated", &generated),
        frames_array("untrained", &baseline),
        labels_array(&test.labels),
    ];
    save_container(&layout.generate(), &arrays, json!({ "provenance": provenance }))
}

/// Evaluation of the `generate` artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub provenance: Provenance,
    /// Classification of the real frames, for reference.
    pub real_classification: CVResult,
    pub variants: Vec<Scored>,
}

fn labels_from(c: &Container) -> Result<Vec<bool>> {
    Ok(typed::<Ix1>(c, "labels")?.iter().map(|&v| v > 0.5).collect())
}

fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    require(&layout.generate(), Command::Generate)?;
    let c = load_container(&layout.generate())?;
    let provenance = Provenance::new(cfg, Command::Evaluate, &[&layout.generate()])?;
    let real = typed::<Ix3>(&c, "real")?;
    let labels = labels_from(&c)?;
    let mut variants = Vec::new();
    for name in ["generated", "untrained"] {
        if c.arrays.contains_key(name) {
            variants.push(score(cfg, name, &real, &typed::<Ix3>(&c, name)?, &labels)?);
        }
    }
    let classifier = crate::metrics::ClassifierConfig { seed: cfg.seed_for(Stage::Classifier), ..cfg.classifier };
    let real_classification = classify_kfold(&flatten(&real), &labels, &classifier)?;
    write_json(&layout.evaluate().join(RESULTS), &Evaluation { provenance, real_classification, variants })
}

/// The CAB-bypassed model trained and scored like the main one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CabAblation {
    pub provenance: Provenance,
    pub bypass: Scored,
    pub loss_history: Vec<f64>,
}

fn cab_ablation(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let (model, state) = train_diffusion(cfg, layout, Conditioning::Bypass)?;
    let data = load_dataset(cfg, layout)?;
    let vae = load_vae(cfg, layout)?;
    let provenance = Provenance::new(
        cfg,
        Command::CabAblation,
        &[&layout.data(), &layout.vae(), &layout.diffusion(Conditioning::Bypass)],
    )?;
    let test = paired_frames(cfg, &data.test, cfg.dtfs.band)?;
    let generated = generate_frames(cfg, &model, &vae, &test.features)?;
    let bypass = score(cfg, "bypass", &test.frames, &generated, &test.labels)?;
    save_container(
        &layout.cab_ablation(),
        &[frames_array("generated", &generated), labels_array(&test.labels)],
        json!({ "provenance": provenance }),
    )?;
    write_json(&layout.cab_ablation().join(RESULTS), &CabAblation { provenance, bypass, loss_history: state.loss_history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: BandName,
    pub metrics: MetricReport,
    pub classification: CVResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandAblation {
    pub provenance: Provenance,
    pub rows: Vec<BandRow>,
}

fn band_ablation(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let data = load_dataset(cfg, layout)?;
    let vae = load_vae(cfg, layout)?;
    let mode = cfg.denoiser.conditioning;
    let (model, _) = load_checkpoint(&layout.diffusion(mode), cfg, mode)?;
    let provenance = Provenance::new(cfg, Command::BandAblation, &[&layout.data(), &layout.vae(), &layout.diffusion(mode)])?;
    let mut rows = Vec::with_capacity(BandName::ALL.len());
    for band in BandName::ALL {
        let test = paired_frames(cfg, &data.test, band)?;
        let generated = generate_frames(cfg, &model, &vae, &test.features)?;
        let scored = score(cfg, band.as_str(), &test.frames, &generated, &test.labels)?;
        rows.push(BandRow { band, metrics: scored.metrics, classification: scored.classification });
    }
    write_json(&layout.band_ablation().join(RESULTS), &BandAblation { provenance, rows })
}

/// One cell of the super-resolution comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    pub row: usize,
    pub col: usize,
    pub lowres: Vec<f64>,
    pub truth: Vec<f64>,
    pub generated: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Superres {
    pub provenance: Provenance,
    pub group: usize,
    pub lowres_frames: usize,
    pub output_frames: usize,
    pub lowres_tr_s: f64,
    pub output_tr_s: f64,
    /// Largest `|group mean − low-res latent|` over all latent values.
    pub latent_group_residual: f64,
    /// Mean Pearson correlation with the hidden high-rate truth over the
    /// driven cells.
    pub corr_superres: f64,
    pub corr_nearest: f64,
    pub cells: Vec<(usize, usize)>,
    /// Traces of a few cells for plotting.
    pub traces: Vec<CellTrace>,
}

/// Cells whose BOLD is driven by any configured band.
pub fn scored_cells(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> =
        cfg.synth.driven_bands.iter().flat_map(|&b| driven_cells(&cfg.synth, b, 0.5)).collect();
    cells.sort_unstable();
    cells.dedup();
    cells
}

const TRACE_CELLS: usize = 3;

fn superres(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let data = load_dataset(cfg, layout)?;
    let vae = load_vae(cfg, layout)?;
    let mode = cfg.denoiser.conditioning;
    let (model, _) = load_checkpoint(&layout.diffusion(mode), cfg, mode)?;
    let provenance = Provenance::new(cfg, Command::Superres, &[&layout.data(), &layout.vae(), &layout.diffusion(mode)])?;
    let group = cfg.sampler.constraint.group;
    let hires = standardize(&data.hires.bold);
    let lowres = hires.decimate(group)?;

    // Low-res frames before one full window are excluded with their groups.
    let first = (0..lowres.len())
        .find(|&g| lowres.onset_s(g) >= cfg.dtfs.window_s - 1e-9)
        .ok_or_else(|| input_err("no low-resolution frame has a complete EEG window"))?;
    let feats = window_features(cfg, &data.hires.eeg, cfg.dtfs.band, hires.tr_s)?;
    let pairs = pair_frames(hires.len(), hires.tr_s, cfg.dtfs.window_s, hires.tr_s, feats.len())?;
    let window_of: HashMap<usize, usize> = pairs.into_iter().collect();
    let mut groups = Vec::new();
    let mut features = Vec::new();
    for g in first..lowres.len() {
        let members: Option<Vec<usize>> = (g * group..(g + 1) * group).map(|j| window_of.get(&j).copied()).collect();
        let Some(members) = members else { break };
        groups.push(g);
        features.extend(members.into_iter().map(|w| feats[w].clone()));
    }
    if groups.is_empty() {
        return Err(input_err("no complete super-resolution group"));
    }
    let low_frames: Vec<Array2<f64>> = groups.iter().map(|&g| lowres.frame(g)).collect();
    let low_tokens = encode_tokens(&vae, &low_frames, cfg.patch_size)?;
    let sched = cfg.schedule.build()?;
    let tokens = sample_superres(&model, &features, &low_tokens, &sched, &sampler(cfg))?;

    let mut residual: f64 = 0.0;
    for (gi, z) in low_tokens.iter().enumerate() {
        let mut mean = Mat::zeros(z.dim());
        for t in &tokens[gi * group..(gi + 1) * group] {
            mean += t;
        }
        mean /= group as f64;
        residual = residual.max((&mean - z).iter().fold(0.0, |m, v| m.max(v.abs())));
    }

    let generated = decode_tokens(&vae, &tokens, cfg.patch_size)?;
    let start = groups[0] * group;
    let truth = hires.frames.slice(s![start..start + tokens.len(), .., ..]).to_owned();
    let low = stack(&low_frames);
    let nearest = Array3::from_shape_fn(truth.dim(), |(j, r, c)| low[[j / group, r, c]]);
    let cells = scored_cells(cfg);
    let corr = |est: &Array3<f64>| -> f64 {
        let vals: Vec<f64> = cells
            .iter()
            .filter_map(|&(r, c)| {
                let a: Vec<f64> = est.slice(s![.., r, c]).to_vec();
                let b: Vec<f64> = truth.slice(s![.., r, c]).to_vec();
                pearson(&a, &b)
            })
            .collect();
        if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
    };
    let traces = pick_trace_cells(&cells)
        .into_iter()
        .map(|(r, c)| CellTrace {
            row: r,
            col: c,
            lowres: low.slice(s![.., r, c]).to_vec(),
            truth: truth.slice(s![.., r, c]).to_vec(),
            generated: generated.slice(s![.., r, c]).to_vec(),
        })
        .collect();
    let result = Superres {
        provenance: provenance.clone(),
        group,
        lowres_frames: groups.len(),
        output_frames: generated.dim().0,
        lowres_tr_s: lowres.tr_s,
        output_tr_s: hires.tr_s,
        latent_group_residual: residual,
        corr_superres: corr(&generated),
        corr_nearest: corr(&nearest),
        cells,
        traces,
    };
    save_container(
        &layout.superres(),
        &[frames_array("generated", &generated), frames_array("truth", &truth), frames_array("lowres", &low)],
        json!({ "provenance": provenance }),
    )?;
    write_json(&layout.superres().join(RESULTS), &result)
}

/// First, middle and last of the scored cells.
fn pick_trace_cells(cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if cells.len() <= TRACE_CELLS {
        return cells.to_vec();
    }
    (0..TRACE_CELLS).map(|i| cells[i * (cells.len() - 1) / (TRACE_CELLS - 1)]).collect()
}

fn report(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    for dir in [
        layout.vae(),
        layout.diffusion(Conditioning::Cab),
        layout.diffusion(Conditioning::Bypass),
        layout.generate(),
        layout.superres(),
        layout.cab_ablation(),
    ] {
        if read_manifest(&dir).is_ok() {
            inputs.push(dir);
        }
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let mut provenance = Provenance::new(cfg, Command::Report, &refs)?;
    let results = collect_report(layout)?;
    // Results files are inputs too.
    let mut hashed = vec![("inputs".to_string(), provenance.input_hash.into_bytes())];
    for (name, bytes) in &results.sources {
        hashed.push((name.clone(), bytes.clone()));
    }
    provenance.input_hash = content_hash(&hashed);
    emit_report(&results, &provenance, &layout.report())
}

/// Stages needed before `command` can run, in order.
pub fn prerequisites(command: Command) -> &'static [Command] {
    match command {
        Command::Synth | Command::Report => &[],
        Command::TrainVae => &[Command::Synth],
        Command::TrainDiffusion | Command::CabAblation => &[Command::Synth, Command::TrainVae],
        Command::Generate | Command::Superres | Command::BandAblation => {
            &[Command::Synth, Command::TrainVae, Command::TrainDiffusion]
        }
        Command::Evaluate => &[Command::Synth, Command::TrainVae, Command::TrainDiffusion, Command::Generate],
    }
}
