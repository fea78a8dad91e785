use ndarray::s;
use serde::{Deserialize, Serialize};

use super::{NoisePredictor, NoiseSchedule};
use crate::error::{config_err, input_err, CatdError, Result};
use crate::nn::{normal_mat, seeded_rng, SeededRng};
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Mean-only update with no injected noise.
    #[default]
    PaperMean,
    /// Mean update plus `σ_t z` for `t > 1`.
    Ancestral,
}

/// Low-resolution consistency applied during super-resolution sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraint {
    pub group: usize,
    /// Projection strength for `t > 1`; the final step always uses 1.
    pub strength: f64,
}

impl Default for Constraint {
    fn default() -> Self {
        Constraint { group: 3, strength: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub seed: u64,
    pub constraint: Constraint,
    /// Samples denoised together per network call.
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { mode: SamplerMode::PaperMean, seed: 0, constraint: Constraint::default(), batch: 32 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.constraint.group == 0 {
            return Err(config_err("constraint group size must be at least 1"));
        }
        if !(self.constraint.strength > 0.0 && self.constraint.strength <= 1.0) {
            return Err(config_err("constraint strength must lie in (0, 1]"));
        }
        if self.batch == 0 {
            return Err(config_err("sampler batch must be positive"));
        }
        Ok(())
    }
}

/// `(x_t − β_t / √(1 − ᾱ_t) · eps_hat) / √α_t`.
pub fn reverse_mean(x_t: &Mat, eps_hat: &Mat, alpha: f64, alpha_bar: f64, beta: f64) -> Mat {
    (x_t - &(eps_hat * (beta / (1.0 - alpha_bar).sqrt()))) / alpha.sqrt()
}

pub fn reverse_step(
    x_t: &Mat,
    t: usize,
    eps_hat: &Mat,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut SeededRng,
) -> Result<Mat> {
    sched.check_step(t)?;
    if x_t.dim() != eps_hat.dim() {
        return Err(config_err("state and noise estimate shapes differ"));
    }
    let mean = reverse_mean(x_t, eps_hat, sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
    Ok(match mode {
        SamplerMode::Ancestral if t > 1 => {
            let z = normal_mat(rng, x_t.nrows(), x_t.ncols(), 1.0);
            mean + z * sched.reverse_var[t - 1].sqrt()
        }
        _ => mean,
    })
}

fn stack(items: &[Mat]) -> Mat {
    let views: Vec<_> = items.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Runs the reverse chain for a chunk of samples, calling `project` after
/// every step with the step index just completed.
fn run_chain<P: NoisePredictor>(
    model: &P,
    features: &[Mat],
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut SeededRng,
    mut project: impl FnMut(&mut Mat, usize),
) -> Result<Vec<Mat>> {
    let (n, w) = model.token_shape();
    let b = features.len();
    let feats = stack(features);
    let mut x = normal_mat(rng, b * n, w, 1.0);
    for t in (1..=sched.timesteps()).rev() {
        let eps_hat = model.predict(&x, &vec![t; b], &feats)?;
        x = reverse_step(&x, t, &eps_hat, sched, mode, rng)?;
        project(&mut x, t);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CatdError::SamplingDivergence { t });
        }
    }
    Ok((0..b).map(|i| x.slice(s![i * n..(i + 1) * n, ..]).to_owned()).collect())
}

/// Draws one latent token matrix per condition from `x_T ~ N(0, I)`.
pub fn sample<P: NoisePredictor>(
    model: &P,
    features: &[Mat],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<Mat>> {
    cfg.validate()?;
    if sched.timesteps() > model.max_timestep() {
        return Err(config_err("schedule is longer than the model's step range"));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(cfg.batch) {
        out.extend(run_chain(model, chunk, sched, cfg.mode, &mut rng, |_, _| {})?);
    }
    Ok(out)
}

/// Moves each group of `group` consecutive samples toward a target mean:
/// `x ← x + λ (target − group mean)`.
pub fn project_groups(x: &mut Mat, per_sample: usize, group: usize, targets: &[Mat], strength: f64) {
    let rows = per_sample * group;
    for (g, target) in targets.iter().enumerate() {
        let block = x.slice(s![g * rows..(g + 1) * rows, ..]);
        let mut mean = Mat::zeros(target.dim());
        for j in 0..group {
            mean += &block.slice(s![j * per_sample..(j + 1) * per_sample, ..]);
        }
        mean /= group as f64;
        let shift = (target - &mean) * strength;
        for j in 0..group {
            let start = g * rows + j * per_sample;
            let mut member = x.slice_mut(s![start..start + per_sample, ..]);
            member += &shift;
        }
    }
}

/// Generates `group` frames per low-resolution latent, constrained so each
/// group's mean tracks the low-resolution latent carried through the forward
/// marginal mean `√ᾱ_t z`.
pub fn sample_superres<P: NoisePredictor>(
    model: &P,
    features: &[Mat],
    lowres: &[Mat],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<Mat>> {
    cfg.validate()?;
    let group = cfg.constraint.group;
    if features.len() != group * lowres.len() {
        return Err(input_err(format!(
            "{} condition windows do not align with {} low-resolution frames in groups of {group}",
            features.len(),
            lowres.len()
        )));
    }
    let (n, w) = model.token_shape();
    if lowres.iter().any(|z| z.dim() != (n, w)) {
        return Err(config_err("low-resolution latents do not match the token shape"));
    }
    let mut rng = seeded_rng(cfg.seed);
    let groups_per_chunk = (cfg.batch / group).max(1);
    let mut out = Vec::with_capacity(features.len());
    for (ci, zs) in lowres.chunks(groups_per_chunk).enumerate() {
        let start = ci * groups_per_chunk * group;
        let chunk = &features[start..start + zs.len() * group];
        let project = |x: &mut Mat, t: usize| {
            let scale = sched.alpha_bar(t - 1).sqrt();
            let targets: Vec<Mat> = zs.iter().map(|z| z * scale).collect();
            let strength = if t == 1 { 1.0 } else { cfg.constraint.strength };
            project_groups(x, n, group, &targets, strength);
        };
        out.extend(run_chain(model, chunk, sched, cfg.mode, &mut rng, project)?);
    }
    Ok(out)
}
