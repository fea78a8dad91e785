//! Noise-prediction transformer.
//!
//! Latent tokens are embedded, given a learned positional offset and passed
//! through `depth` pre-norm blocks of self-attention, cross-attention and a
//! feed-forward layer. The EEG condition and the diffusion step meet in the
//! conditioning block (CAB) once per forward pass; its output is the key/value
//! source of every block's cross-attention.
//!
//! With [`Conditioning::Bypass`] the CAB is removed: the embedded EEG tokens
//! feed cross-attention directly and the step embedding is added to the
//! latent token embeddings instead.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::bold_latent::LatentTokens;
use crate::eeg_cond::{ConditionEmbedding, ConditionTokens};
use crate::error::{config_err, input_err, Result};
use crate::nn::{seeded_rng, ParamId, ParamSet, SeededRng};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    #[default]
    Cab,
    Bypass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub model_width: usize,
    pub n_heads: usize,
    pub token_count: usize,
    pub token_width: usize,
    pub max_timestep: usize,
    /// Width of the raw condition features fed to the embedding layer.
    pub cond_features: usize,
    pub mlp_ratio: usize,
    pub conditioning: Conditioning,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            depth: 4,
            model_width: 128,
            n_heads: 4,
            token_count: 16,
            token_width: 16,
            max_timestep: 200,
            cond_features: 40,
            mlp_ratio: 2,
            conditioning: Conditioning::Cab,
        }
    }
}

impl DenoiserConfig {
    pub fn with_conditioning(self, conditioning: Conditioning) -> Self {
        DenoiserConfig { conditioning, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err("denoiser depth must be at least 1"));
        }
        if self.n_heads == 0 || self.model_width % self.n_heads != 0 {
            return Err(config_err(format!(
                "model width {} is not divisible by {} heads",
                self.model_width, self.n_heads
            )));
        }
        if self.token_count == 0 || self.token_width == 0 || self.cond_features == 0 || self.mlp_ratio == 0 {
            return Err(config_err("denoiser dimensions must be positive"));
        }
        if self.max_timestep == 0 {
            return Err(config_err("max timestep must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal step encoding: `dim/2` sines followed by `dim/2` cosines over
/// geometrically spaced frequencies. Odd `dim` leaves a trailing zero.
pub fn timestep_embedding(t: usize, dim: usize, max_timestep: usize) -> Result<Array1<f64>> {
    if t > max_timestep {
        return Err(input_err(format!("step {t} outside [0, {max_timestep}]")));
    }
    if dim < 2 {
        return Err(config_err("timestep embedding needs at least 2 dimensions"));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let w = params.add_weight(&format!("{name}.w"), rows, cols, rng);
        let b = params.add_zeros(&format!("{name}.b"), 1, cols);
        Linear { w, b }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
struct AttentionIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttentionIds {
    fn new(params: &mut ParamSet, name: &str, width: usize, rng: &mut SeededRng) -> Self {
        AttentionIds {
            q: Linear::new(params, &format!("{name}.q"), width, width, rng),
            k: Linear::new(params, &format!("{name}.k"), width, width, rng),
            v: Linear::new(params, &format!("{name}.v"), width, width, rng),
            o: Linear::new(params, &format!("{name}.o"), width, width, rng),
        }
    }

    /// Projected multi-head attention of `xq` over `xkv`, blockwise per group.
    fn apply(self, tape: &mut Tape, xq: Var, xkv: Var, heads: usize, groups: usize) -> (Var, Var) {
        let q = self.q.apply(tape, xq);
        let k = self.k.apply(tape, xkv);
        let v = self.v.apply(tape, xkv);
        let att = tape.attention(q, k, v, heads, groups);
        (self.o.apply(tape, att), att)
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    self_attn: AttentionIds,
    cross_attn: AttentionIds,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_in: Linear,
    pos: ParamId,
    cond: Linear,
    cab_cond: Option<Linear>,
    cab_time: Option<Linear>,
    cab_out: Option<Linear>,
    time_bypass: Option<Linear>,
    blocks: Vec<BlockIds>,
    head: Linear,
}

/// Forward-pass by-products exposed for inspection.
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: Mat,
    /// Every attention probability matrix of every layer.
    pub attention: Vec<Mat>,
}

#[derive(Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    /// Fixed per-feature multiplier applied before the condition embedding.
    pub feature_scale: Array1<f64>,
    layout: Layout,
    cab_calls: AtomicUsize,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Denoiser {
            config: self.config.clone(),
            params: self.params.clone(),
            feature_scale: self.feature_scale.clone(),
            layout: self.layout.clone(),
            cab_calls: AtomicUsize::new(self.cab_calls()),
        }
    }
}

/// Tape handles produced by one forward pass.
struct Forward {
    output: Var,
    attention: Vec<Var>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut p = ParamSet::default();
        let w = config.model_width;
        let embed_in = Linear::new(&mut p, "embed", config.token_width, w, &mut rng);
        let pos = p.add("pos", crate::nn::normal_mat(&mut rng, config.token_count, w, 0.1));
        let cond = Linear::new(&mut p, "cond", config.cond_features, w, &mut rng);
        let (mut cab_cond, mut cab_time, mut cab_out, mut time_bypass) = (None, None, None, None);
        match config.conditioning {
            Conditioning::Cab => {
                cab_cond = Some(Linear::new(&mut p, "cab.cond", w, w, &mut rng));
                cab_time = Some(Linear::new(&mut p, "cab.time", w, w, &mut rng));
                cab_out = Some(Linear::new(&mut p, "cab.out", w, w, &mut rng));
            }
            Conditioning::Bypass => time_bypass = Some(Linear::new(&mut p, "time", w, w, &mut rng)),
        }
        let blocks = (0..config.depth)
            .map(|i| BlockIds {
                self_attn: AttentionIds::new(&mut p, &format!("block{i}.self"), w, &mut rng),
                cross_attn: AttentionIds::new(&mut p, &format!("block{i}.cross"), w, &mut rng),
                mlp_in: Linear::new(&mut p, &format!("block{i}.mlp_in"), w, w * config.mlp_ratio, &mut rng),
                mlp_out: Linear::new(&mut p, &format!("block{i}.mlp_out"), w * config.mlp_ratio, w, &mut rng),
            })
            .collect();
        let head = Linear::new(&mut p, "head", w, config.token_width, &mut rng);
        let layout = Layout { embed_in, pos, cond, cab_cond, cab_time, cab_out, time_bypass, blocks, head };
        Ok(Denoiser {
            feature_scale: Array1::ones(config.cond_features),
            config,
            params: p,
            layout,
            cab_calls: AtomicUsize::new(0),
        })
    }

    /// Number of CAB evaluations since construction.
    pub fn cab_calls(&self) -> usize {
        self.cab_calls.load(Ordering::Relaxed)
    }

    /// Sets `feature_scale` to the reciprocal RMS of each feature column.
    pub fn fit_feature_scale(&mut self, features: &[&Mat]) {
        let mut sum = Array1::<f64>::zeros(self.config.cond_features);
        let mut count = 0usize;
        for f in features {
            for row in f.rows() {
                sum += &row.mapv(|v| v * v);
                count += 1;
            }
        }
        if count > 0 {
            self.feature_scale = sum.mapv(|s| {
                let rms = (s / count as f64).sqrt();
                if rms > 0.0 { 1.0 / rms } else { 1.0 }
            });
        }
    }

    /// The condition embedding layer as a standalone map.
    pub fn embedding(&self) -> ConditionEmbedding {
        ConditionEmbedding {
            feature_scale: self.feature_scale.clone(),
            weight: self.params.get(self.layout.cond.w).clone(),
            bias: self.params.get(self.layout.cond.b).clone(),
        }
    }

    fn check_steps(&self, ts: &[usize], lo: usize) -> Result<()> {
        let max = self.config.max_timestep;
        match ts.iter().find(|&&t| t < lo || t > max) {
            Some(t) => Err(input_err(format!("step {t} outside [{lo}, {max}]"))),
            None => Ok(()),
        }
    }

    fn check_rows(&self, m: &Mat, per_sample: usize, width: usize, what: &str) -> Result<usize> {
        if m.ncols() != width || m.nrows() == 0 || m.nrows() % per_sample != 0 {
            return Err(config_err(format!(
                "{what} has shape {:?}; expected a multiple of {per_sample} rows and {width} columns",
                m.dim()
            )));
        }
        Ok(m.nrows() / per_sample)
    }

    fn step_matrix(&self, ts: &[usize]) -> Result<Mat> {
        let w = self.config.model_width;
        let mut m = Mat::zeros((ts.len(), w));
        for (i, &t) in ts.iter().enumerate() {
            m.row_mut(i).assign(&timestep_embedding(t, w, self.config.max_timestep)?);
        }
        Ok(m)
    }

    /// Scales raw features and applies the embedding layer on the tape.
    pub fn embed_on_tape(&self, tape: &mut Tape, features: &Mat) -> Var {
        let scaled = features * &self.feature_scale;
        let f = tape.constant(scaled);
        self.layout.cond.apply(tape, f)
    }

    fn cab_on_tape(&self, tape: &mut Tape, cond: Var, steps: &Mat) -> Var {
        self.cab_calls.fetch_add(1, Ordering::Relaxed);
        let (Some(cc), Some(ct), Some(co)) = (self.layout.cab_cond, self.layout.cab_time, self.layout.cab_out) else {
            return cond;
        };
        let per_sample = tape.value(cond).nrows() / steps.nrows();
        let s = tape.constant(steps.clone());
        let tp = ct.apply(tape, s);
        let tp = tape.expand_rows(tp, per_sample);
        let cp = cc.apply(tape, cond);
        let h = tape.add(cp, tp);
        let h = tape.gelu(h);
        co.apply(tape, h)
    }

    fn block_on_tape(&self, tape: &mut Tape, b: &BlockIds, x: Var, cond: Var, groups: usize, probs: &mut Vec<Var>) -> Var {
        let heads = self.config.n_heads;
        let h = tape.layer_norm(x);
        let (sa, p1) = b.self_attn.apply(tape, h, h, heads, groups);
        let x = tape.add(x, sa);
        let h = tape.layer_norm(x);
        let (ca, p2) = b.cross_attn.apply(tape, h, cond, heads, groups);
        let x = tape.add(x, ca);
        let h = tape.layer_norm(x);
        let m = b.mlp_in.apply(tape, h);
        let m = tape.gelu(m);
        let m = b.mlp_out.apply(tape, m);
        probs.extend([p1, p2]);
        tape.add(x, m)
    }

    /// Full network on the tape. `x` stacks `ts.len()` samples of
    /// `token_count` rows; `cond` stacks the embedded condition tokens.
    fn forward_on_tape(&self, tape: &mut Tape, x: Var, ts: &[usize], cond: Var) -> Result<Forward> {
        let groups = ts.len();
        let steps = self.step_matrix(ts)?;
        let mut h = self.layout.embed_in.apply(tape, x);
        let pos = tape.param(self.layout.pos);
        let pos = tape.tile_rows(pos, groups);
        h = tape.add(h, pos);
        let kv = match self.layout.time_bypass {
            Some(tl) => {
                let s = tape.constant(steps);
                let tp = tl.apply(tape, s);
                let tp = tape.expand_rows(tp, self.config.token_count);
                h = tape.add(h, tp);
                cond
            }
            None => self.cab_on_tape(tape, cond, &steps),
        };
        let mut attention = Vec::with_capacity(2 * self.config.depth);
        for b in &self.layout.blocks {
            h = self.block_on_tape(tape, b, h, kv, groups, &mut attention);
        }
        let h = tape.layer_norm(h);
        Ok(Forward { output: self.layout.head.apply(tape, h), attention })
    }

    /// Noise prediction on a stacked batch built on `tape`, taking raw
    /// condition features (`B · tokens × cond_features`).
    pub fn predict_on_tape(&self, tape: &mut Tape, x: Var, ts: &[usize], features: &Mat) -> Result<Var> {
        self.check_steps(ts, 1)?;
        let b = self.check_rows(tape.value(x), self.config.token_count, self.config.token_width, "latent tokens")?;
        if b != ts.len() {
            return Err(config_err(format!("{b} latent samples but {} steps", ts.len())));
        }
        let bc = self.check_rows(features, self.config.token_count, self.config.cond_features, "condition features")?;
        if bc != b {
            return Err(config_err(format!("{b} latent samples but {bc} condition samples")));
        }
        let cond = self.embed_on_tape(tape, features);
        Ok(self.forward_on_tape(tape, x, ts, cond)?.output)
    }

    /// Batched noise prediction from raw condition features.
    pub fn predict(&self, x: &Mat, ts: &[usize], features: &Mat) -> Result<Mat> {
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x.clone());
        let out = self.predict_on_tape(&mut tape, xv, ts, features)?;
        Ok(tape.value(out).clone())
    }

    fn check_cond(&self, cond: &ConditionTokens) -> Result<()> {
        if cond.tokens.dim() != (self.config.token_count, self.config.model_width) {
            return Err(config_err(format!(
                "condition tokens {:?} do not match ({}, {})",
                cond.tokens.dim(),
                self.config.token_count,
                self.config.model_width
            )));
        }
        Ok(())
    }

    /// Conditioning block applied to embedded tokens at step `t`.
    pub fn cab(&self, cond: &ConditionTokens, t: usize) -> Result<ConditionTokens> {
        self.check_cond(cond)?;
        self.check_steps(&[t], 0)?;
        let mut tape = Tape::new(&self.params);
        let c = tape.constant(cond.tokens.clone());
        let steps = self.step_matrix(&[t])?;
        let out = self.cab_on_tape(&mut tape, c, &steps);
        Ok(ConditionTokens { tokens: tape.value(out).clone() })
    }

    /// One transformer block on model-width tokens.
    pub fn transformer_block(&self, index: usize, x: &Mat, cond: &Mat) -> Result<Mat> {
        let b = self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| config_err(format!("block {index} out of range")))?;
        let w = self.config.model_width;
        if x.ncols() != w || cond.ncols() != w || x.nrows() == 0 || cond.nrows() == 0 {
            return Err(config_err("block inputs must have model width"));
        }
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let out = self.block_on_tape(&mut tape, b, xv, cv, 1, &mut Vec::new());
        Ok(tape.value(out).clone())
    }

    /// Noise prediction for a single sample with embedded condition tokens.
    pub fn denoise(&self, x_t: &LatentTokens, t: usize, cond: &ConditionTokens) -> Result<LatentTokens> {
        Ok(LatentTokens { tokens: self.trace(x_t, t, cond)?.output, ..x_t.clone() })
    }

    /// [`Denoiser::denoise`] that also returns every attention map.
    pub fn trace(&self, x_t: &LatentTokens, t: usize, cond: &ConditionTokens) -> Result<Trace> {
        self.check_cond(cond)?;
        self.check_steps(&[t], 1)?;
        self.check_rows(&x_t.tokens, self.config.token_count, self.config.token_width, "latent tokens")?;
        if x_t.token_count() != self.config.token_count {
            return Err(config_err("one sample expected"));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(x_t.tokens.clone());
        let c = tape.constant(cond.tokens.clone());
        let fwd = self.forward_on_tape(&mut tape, x, &[t], c)?;
        let attention = fwd
            .attention
            .iter()
            .flat_map(|&v| tape.attention_probs(v).unwrap_or_default().iter().cloned())
            .collect();
        Ok(Trace { output: tape.value(fwd.output).clone(), attention })
    }

    /// Zeroes every parameter whose name ends with one of `suffixes`.
    pub fn zero_params(&mut self, suffixes: &[&str]) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            if suffixes.iter().any(|s| self.params.name(id).ends_with(s)) {
                self.params.get_mut(id).fill(0.0);
            }
        }
    }
}

/// Splits a stacked `(B · n) × w` matrix into `B` row blocks.
pub fn split_rows(m: &Mat, per_sample: usize) -> Vec<Mat> {
    m.axis_chunks_iter(Axis(0), per_sample).map(|c| c.to_owned()).collect()
}
