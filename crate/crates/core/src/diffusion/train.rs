use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{forward_sample, NoisePredictor, NoiseSchedule};
use crate::denoiser::Denoiser;
use crate::error::{config_err, input_err, CatdError, Result};
use crate::nn::{normal_mat, Adam, SeededRng};
use crate::tape::{Mat, Tape};

/// One training example: clean latent tokens and the raw condition features
/// of the EEG window preceding the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x0: Mat,
    pub features: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { steps: 2000, batch: 8, lr: 5e-4, seed: 0 }
    }
}

/// `‖eps − ε_θ(x_t, t, c)‖²` for one example.
pub fn training_loss<P: NoisePredictor>(
    model: &P,
    pair: &Pair,
    t: usize,
    eps: &Mat,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if eps.dim() != pair.x0.dim() {
        return Err(config_err("noise and latent shapes differ"));
    }
    let xt = forward_sample(&pair.x0, t, eps, sched)?;
    let pred = model.predict(&xt, &[t], &pair.features)?;
    if pred.dim() != eps.dim() {
        return Err(config_err("prediction shape differs from the noise"));
    }
    Ok((eps - &pred).iter().map(|v| v * v).sum())
}

/// Optimisation state of a diffusion run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub seed: u64,
    pub optimizer: Adam,
    /// Batch mean of the per-example objective at every step.
    pub loss_history: Vec<f64>,
    rng: SeededRng,
}

impl TrainState {
    pub fn new(model: &Denoiser, hyper: &TrainHyper) -> Self {
        TrainState {
            step: 0,
            seed: hyper.seed,
            optimizer: Adam::new(&model.params, hyper.lr),
            loss_history: Vec::new(),
            rng: SeededRng::seed_from_u64(hyper.seed ^ 0xD1FF_0510),
        }
    }

    /// Position of the batch stream, for checkpoints.
    pub fn stream_position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_stream_position(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    pub(crate) fn restore(step: usize, seed: u64, optimizer: Adam, loss_history: Vec<f64>, pos: u128) -> Self {
        let mut rng = SeededRng::seed_from_u64(seed ^ 0xD1FF_0510);
        rng.set_word_pos(pos);
        TrainState { step, seed, optimizer, loss_history, rng }
    }
}

/// The summed objective `Σ ‖ε − ε_θ(x_t, t, c)‖²` of a stacked batch, and the
/// parameter gradients of its per-element mean.
pub fn objective_gradients(
    model: &Denoiser,
    x_t: Mat,
    ts: &[usize],
    features: &Mat,
    eps: Mat,
) -> Result<(f64, Vec<Option<Mat>>)> {
    if x_t.dim() != eps.dim() {
        return Err(config_err("noise and latent shapes differ"));
    }
    let elements = eps.len();
    let mut tape = Tape::new(&model.params);
    let xv = tape.constant(x_t);
    let pred = model.predict_on_tape(&mut tape, xv, ts, features)?;
    let e = tape.constant(eps);
    let diff = tape.sub(e, pred);
    let ss = tape.sum_squares(diff);
    let total = tape.value(ss)[[0, 0]];
    let loss = tape.scale(ss, 1.0 / elements as f64);
    Ok((total, tape.backward(loss).into_params()))
}

/// Runs `steps` optimisation steps, appending to `state`.
pub fn train_steps(
    model: &mut Denoiser,
    state: &mut TrainState,
    data: &[Pair],
    sched: &NoiseSchedule,
    batch: usize,
    steps: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(input_err("diffusion training set is empty"));
    }
    if sched.timesteps() > model.config.max_timestep {
        return Err(config_err("schedule is longer than the denoiser's step range"));
    }
    let (n, w) = (model.config.token_count, model.config.token_width);
    let batch = batch.max(1);
    for _ in 0..steps {
        let mut x = Mat::zeros((batch * n, w));
        let mut feats = Mat::zeros((batch * n, model.config.cond_features));
        let mut ts = Vec::with_capacity(batch);
        let mut eps_all = Mat::zeros((batch * n, w));
        for b in 0..batch {
            let pair = &data[state.rng.random_range(0..data.len())];
            let t = state.rng.random_range(1..=sched.timesteps());
            let eps = normal_mat(&mut state.rng, n, w, 1.0);
            let rows = ndarray::s![b * n..(b + 1) * n, ..];
            x.slice_mut(rows).assign(&forward_sample(&pair.x0, t, &eps, sched)?);
            feats.slice_mut(rows).assign(&pair.features);
            eps_all.slice_mut(rows).assign(&eps);
            ts.push(t);
        }
        let (total, grads) = objective_gradients(model, x, &ts, &feats, eps_all)?;
        if !total.is_finite() {
            return Err(CatdError::TrainingDivergence {
                step: state.step,
                diagnostic: format!("loss {total} at steps {ts:?}"),
            });
        }
        state.loss_history.push(total / batch as f64);
        state.optimizer.step(&mut model.params, &grads);
        state.step += 1;
    }
    Ok(())
}

/// Trains a fresh optimiser state for `hyper.steps` steps.
pub fn train(model: &mut Denoiser, data: &[Pair], sched: &NoiseSchedule, hyper: &TrainHyper) -> Result<TrainState> {
    let mut state = TrainState::new(model, hyper);
    train_steps(model, &mut state, data, sched, hyper.batch, hyper.steps)?;
    Ok(state)
}

/// Trailing moving average with a window of `w` points.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}
