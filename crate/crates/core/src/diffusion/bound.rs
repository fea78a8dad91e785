//! Variational bound on `−log p(x0 | c)`.
//!
//! The reverse transitions have the fixed variance `β_t` while the true
//! posterior `q(x_{t−1} | x_t, x0)` has variance `β̃_t`, so each KL term
//! splits into a mean part, which the network controls, and a variance part
//! that depends on the schedule alone.

use serde::{Deserialize, Serialize};

use super::{forward_sample, reverse_mean, NoisePredictor, NoiseSchedule};
use crate::error::{config_err, Result};
use crate::nn::{normal_mat, seeded_rng};
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `−log p(x0 | x1)` under `N(μ_θ(x1), β_1 I)`.
    pub reconstruction: f64,
    /// Sum over `t ≥ 2` of `‖μ̃ − μ_θ‖² / (2β_t)`.
    pub kl_mean: f64,
    /// Sum over `t ≥ 2` of the variance mismatch `½ d (r − 1 − ln r)`, `r = β̃_t / β_t`.
    pub kl_variance: f64,
    pub total: f64,
}

/// Mean of `q(x_{t−1} | x_t, x0)`.
pub fn posterior_mean(x0: &Mat, x_t: &Mat, t: usize, sched: &NoiseSchedule) -> Mat {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0 * c0 + x_t * ct
}

/// Monte-Carlo estimate over `n_mc` draws of every `x_t` from the forward
/// marginal. Steps are evaluated in chunks of `batch` per network call.
pub fn variational_bound<P: NoisePredictor>(
    model: &P,
    x0: &Mat,
    features: &Mat,
    sched: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
) -> Result<BoundTerms> {
    if n_mc == 0 {
        return Err(config_err("bound needs at least one Monte-Carlo draw"));
    }
    let big_t = sched.timesteps();
    let d = x0.len() as f64;
    let kl_variance: f64 = (2..=big_t)
        .map(|t| {
            let r = sched.posterior_var(t) / sched.reverse_var[t - 1];
            0.5 * d * (r - 1.0 - r.ln())
        })
        .sum();
    let mut rng = seeded_rng(seed);
    let (mut recon, mut kl_mean) = (0.0, 0.0);
    let batch = 50;
    for _ in 0..n_mc {
        let steps: Vec<usize> = (1..=big_t).collect();
        for chunk in steps.chunks(batch) {
            let mut xs = Vec::with_capacity(chunk.len());
            for &t in chunk {
                let eps = normal_mat(&mut rng, x0.nrows(), x0.ncols(), 1.0);
                xs.push(forward_sample(x0, t, &eps, sched)?);
            }
            let views: Vec<_> = xs.iter().map(|m| m.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
            let fviews: Vec<_> = (0..chunk.len()).map(|_| features.view()).collect();
            let feats = ndarray::concatenate(ndarray::Axis(0), &fviews).expect("equal widths");
            let eps_hat = model.predict(&stacked, chunk, &feats)?;
            let n = x0.nrows();
            for (i, (&t, xt)) in chunk.iter().zip(&xs).enumerate() {
                let e = eps_hat.slice(ndarray::s![i * n..(i + 1) * n, ..]).to_owned();
                let mu = reverse_mean(xt, &e, sched.alpha(t), sched.alpha_bar(t), sched.beta(t));
                let var = sched.reverse_var[t - 1];
                if t == 1 {
                    let sq: f64 = (x0 - &mu).iter().map(|v| v * v).sum();
                    recon += 0.5 * (sq / var + d * (2.0 * std::f64::consts::PI * var).ln());
                } else {
                    let target = posterior_mean(x0, xt, t, sched);
                    let sq: f64 = (&target - &mu).iter().map(|v| v * v).sum();
                    kl_mean += 0.5 * sq / var;
                }
            }
        }
    }
    let (recon, kl_mean) = (recon / n_mc as f64, kl_mean / n_mc as f64);
    Ok(BoundTerms { reconstruction: recon, kl_mean, kl_variance, total: recon + kl_mean + kl_variance })
}
