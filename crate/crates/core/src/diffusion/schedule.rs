use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::tape::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// The common 1000-step linear range compressed to 200 steps, which keeps
    /// the same `ᾱ` profile and leaves `ᾱ_T` near `5e-5`.
    fn default() -> Self {
        ScheduleConfig { timesteps: 200, beta_start: 5e-4, beta_end: 0.1 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Per-step constants, stored for `t = 1..=T` at index `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub reverse_var: Vec<f64>,
}

/// Linear `β` from `beta_start` to `beta_end` over `t = 1..=T`.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(config_err("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(config_err(format!("invalid beta range [{beta_start}, {beta_end}]")));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { reverse_var: beta.clone(), beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(input_err(format!("step {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    /// Variance of the true posterior `q(x_{t−1} | x_t, x_0)`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_sample(x0: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    if x0.dim() != eps.dim() {
        return Err(config_err("x0 and noise shapes differ"));
    }
    let ab = sched.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// One transition `x_t = √α_t · x_{t−1} + √β_t · eps`.
pub fn forward_step(x_prev: &Mat, t: usize, eps: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check_step(t)?;
    Ok(x_prev * sched.alpha(t).sqrt() + eps * sched.beta(t).sqrt())
}
