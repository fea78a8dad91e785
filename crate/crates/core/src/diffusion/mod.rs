//! Diffusion in latent token space: schedule, forward process, training,
//! reverse sampling, constrained super-resolution and the bound diagnostic.

mod bound;
mod sample;
mod schedule;
mod train;

pub use bound::{posterior_mean, variational_bound, BoundTerms};
pub use sample::{
    project_groups, reverse_mean, reverse_step, sample, sample_superres, Constraint, SamplerConfig, SamplerMode,
};
pub use schedule::{forward_sample, forward_step, make_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{
    moving_average, objective_gradients, train, train_steps, training_loss, Pair, TrainHyper, TrainState,
};

use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::tape::Mat;

/// Anything that predicts the noise in a stacked batch of latent tokens.
pub trait NoisePredictor {
    /// `(token_count, token_width)` of one sample.
    fn token_shape(&self) -> (usize, usize);
    fn max_timestep(&self) -> usize;
    /// `x` stacks `ts.len()` samples; `features` stacks their raw condition
    /// features.
    fn predict(&self, x: &Mat, ts: &[usize], features: &Mat) -> Result<Mat>;
}

impl NoisePredictor for Denoiser {
    fn token_shape(&self) -> (usize, usize) {
        (self.config.token_count, self.config.token_width)
    }

    fn max_timestep(&self) -> usize {
        self.config.max_timestep
    }

    fn predict(&self, x: &Mat, ts: &[usize], features: &Mat) -> Result<Mat> {
        Denoiser::predict(self, x, ts, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Conditioning, DenoiserConfig};
    use crate::nn::{normal_mat, seeded_rng};

    /// Returns a fixed matrix regardless of input.
    struct Fixed(Mat);

    impl NoisePredictor for Fixed {
        fn token_shape(&self) -> (usize, usize) {
            self.0.dim()
        }
        fn max_timestep(&self) -> usize {
            usize::MAX
        }
        fn predict(&self, _: &Mat, ts: &[usize], _: &Mat) -> Result<Mat> {
            let views: Vec<_> = ts.iter().map(|_| self.0.view()).collect();
            Ok(ndarray::concatenate(ndarray::Axis(0), &views).unwrap())
        }
    }

    /// Recovers the exact noise from a known clean sample.
    struct Oracle {
        x0: Mat,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn token_shape(&self) -> (usize, usize) {
            self.x0.dim()
        }
        fn max_timestep(&self) -> usize {
            self.sched.timesteps()
        }
        fn predict(&self, x: &Mat, ts: &[usize], _: &Mat) -> Result<Mat> {
            let n = self.x0.nrows();
            let mut out = x.clone();
            for (i, &t) in ts.iter().enumerate() {
                let ab = self.sched.alpha_bar(t);
                let mut rows = out.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]);
                rows -= &(&self.x0 * ab.sqrt());
                rows /= (1.0 - ab).sqrt();
            }
            Ok(out)
        }
    }

    fn mini_config() -> DenoiserConfig {
        DenoiserConfig {
            depth: 1,
            model_width: 16,
            n_heads: 2,
            token_count: 4,
            token_width: 4,
            max_timestep: 20,
            cond_features: 3,
            mlp_ratio: 2,
            conditioning: Conditioning::Cab,
        }
    }

    fn mini_data(count: usize, seed: u64) -> Vec<Pair> {
        let mut rng = seeded_rng(seed);
        (0..count)
            .map(|_| {
                let features = normal_mat(&mut rng, 4, 3, 1.0);
                Pair { x0: features.dot(&Mat::ones((3, 4))) * 0.3, features }
            })
            .collect()
    }

    fn sched20() -> NoiseSchedule {
        make_schedule(20, 1e-3, 0.3).unwrap()
    }

    #[test]
    fn zero_beta_step_is_identity() {
        let x = normal_mat(&mut seeded_rng(1), 3, 2, 1.0);
        let e = normal_mat(&mut seeded_rng(2), 3, 2, 1.0);
        assert_eq!(reverse_mean(&x, &e, 1.0, 0.5, 0.0), x);
    }

    #[test]
    fn reverse_update_substitution() {
        let x = Mat::from_elem((1, 1), 1.3);
        let e = Mat::from_elem((1, 1), -0.4);
        let got = reverse_mean(&x, &e, 0.99, 0.5, 0.01)[[0, 0]];
        let want = (1.3 - (0.01 / 0.5f64.sqrt()) * -0.4) / 0.99f64.sqrt();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn first_step_inverts_forward_sample() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = normal_mat(&mut seeded_rng(3), 4, 4, 1.0);
        let eps = normal_mat(&mut seeded_rng(4), 4, 4, 1.0);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        for mode in [SamplerMode::PaperMean, SamplerMode::Ancestral] {
            let back = reverse_step(&x1, 1, &eps, &s, mode, &mut seeded_rng(5)).unwrap();
            let err = (&back - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn ancestral_noise_only_above_step_one() {
        let s = sched20();
        let x = normal_mat(&mut seeded_rng(6), 2, 2, 1.0);
        let e = normal_mat(&mut seeded_rng(7), 2, 2, 1.0);
        let mean = reverse_step(&x, 5, &e, &s, SamplerMode::PaperMean, &mut seeded_rng(8)).unwrap();
        let anc = reverse_step(&x, 5, &e, &s, SamplerMode::Ancestral, &mut seeded_rng(8)).unwrap();
        assert_ne!(mean, anc);
        assert!(reverse_step(&x, 21, &e, &s, SamplerMode::PaperMean, &mut seeded_rng(8)).is_err());
    }

    #[test]
    fn stub_losses() {
        let s = sched20();
        let pair = mini_data(1, 9).remove(0);
        let eps = normal_mat(&mut seeded_rng(10), 4, 4, 1.0);
        assert_eq!(training_loss(&Fixed(eps.clone()), &pair, 3, &eps, &s).unwrap(), 0.0);
        let v = normal_mat(&mut seeded_rng(11), 4, 4, 1.0);
        let expected: f64 = v.iter().map(|a| a * a).sum();
        let got = training_loss(&Fixed(&eps + &v), &pair, 3, &eps, &s).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_mean_vanishes_for_posterior_matching_noise() {
        let s = sched20();
        let x0 = normal_mat(&mut seeded_rng(12), 4, 4, 1.0);
        let oracle = Oracle { x0: x0.clone(), sched: s.clone() };
        let b = variational_bound(&oracle, &x0, &Mat::zeros((4, 3)), &s, 2, 0).unwrap();
        assert!(b.kl_mean.abs() < 1e-9, "{}", b.kl_mean);
        assert!(b.kl_variance >= 0.0 && b.total.is_finite());
        assert!(variational_bound(&oracle, &x0, &Mat::zeros((4, 3)), &s, 0, 0).is_err());
    }

    #[test]
    fn bound_is_seed_deterministic() {
        let s = sched20();
        let d = Denoiser::new(mini_config(), 1).unwrap();
        let p = mini_data(1, 13).remove(0);
        let a = variational_bound(&d, &p.x0, &p.features, &s, 1, 7).unwrap();
        assert_eq!(a, variational_bound(&d, &p.x0, &p.features, &s, 1, 7).unwrap());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let s = sched20();
        let data = mini_data(8, 14);
        let hyper = TrainHyper { steps: 5, batch: 2, lr: 1e-3, seed: 3 };
        let run = || {
            let mut d = Denoiser::new(mini_config(), 2).unwrap();
            train(&mut d, &data, &s, &hyper).unwrap().loss_history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resuming_matches_one_long_run() {
        let s = sched20();
        let data = mini_data(8, 15);
        let hyper = TrainHyper { steps: 6, batch: 2, lr: 1e-3, seed: 4 };
        let mut full = Denoiser::new(mini_config(), 3).unwrap();
        let full_state = train(&mut full, &data, &s, &hyper).unwrap();

        let mut part = Denoiser::new(mini_config(), 3).unwrap();
        let mut st = TrainState::new(&part, &hyper);
        train_steps(&mut part, &mut st, &data, &s, 2, 3).unwrap();
        let restored = TrainState::restore(st.step, st.seed, st.optimizer.clone(), st.loss_history.clone(), st.stream_position());
        let mut st = restored;
        train_steps(&mut part, &mut st, &data, &s, 2, 3).unwrap();
        assert_eq!(st.loss_history, full_state.loss_history);
        assert_eq!(part.params, full.params);
    }

    #[test]
    fn small_step_reduces_single_sample_loss() {
        let s = sched20();
        let data = mini_data(1, 16);
        let eps = normal_mat(&mut seeded_rng(17), 4, 4, 1.0);
        let mut d = Denoiser::new(mini_config(), 5).unwrap();
        // Minimise the fixed-(t, eps) objective with plain gradient steps.
        let before = training_loss(&d, &data[0], 10, &eps, &s).unwrap();
        let grads = {
            let xt = forward_sample(&data[0].x0, 10, &eps, &s).unwrap();
            let mut tape = crate::tape::Tape::new(&d.params);
            let xv = tape.constant(xt);
            let pred = d.predict_on_tape(&mut tape, xv, &[10], &data[0].features).unwrap();
            let e = tape.constant(eps.clone());
            let diff = tape.sub(e, pred);
            let l = tape.sum_squares(diff);
            tape.backward(l).into_params()
        };
        for (id, g) in d.params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            if let Some(g) = g {
                *d.params.get_mut(id) -= &(g * 1e-4);
            }
        }
        assert!(training_loss(&d, &data[0], 10, &eps, &s).unwrap() < before);
    }

    #[test]
    fn empty_training_set_is_input_error() {
        let mut d = Denoiser::new(mini_config(), 6).unwrap();
        let r = train(&mut d, &[], &sched20(), &TrainHyper::default());
        assert!(matches!(r, Err(crate::CatdError::Input(_))));
    }

    #[test]
    fn sampling_shapes_and_determinism() {
        let s = sched20();
        let d = Denoiser::new(mini_config(), 7).unwrap();
        let feats: Vec<Mat> = mini_data(3, 18).into_iter().map(|p| p.features).collect();
        let cfg = SamplerConfig { batch: 2, ..SamplerConfig::default() };
        let a = sample(&d, &feats, &s, &cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|m| m.dim() == (4, 4)));
        let b = sample(&d, &feats, &s, &cfg).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())));
    }

    #[test]
    fn superres_terminal_projection_is_exact() {
        let s = sched20();
        let d = Denoiser::new(mini_config(), 8).unwrap();
        let feats: Vec<Mat> = mini_data(6, 19).into_iter().map(|p| p.features).collect();
        let lows: Vec<Mat> = (0..2).map(|i| normal_mat(&mut seeded_rng(20 + i), 4, 4, 1.0)).collect();
        let cfg = SamplerConfig { batch: 3, ..SamplerConfig::default() };
        let hi = sample_superres(&d, &feats, &lows, &s, &cfg).unwrap();
        assert_eq!(hi.len(), 3 * lows.len());
        for (g, low) in lows.iter().enumerate() {
            let mean = (&hi[3 * g] + &hi[3 * g + 1] + &hi[3 * g + 2]) / 3.0;
            let err = (&mean - low).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-5, "{err}");
        }
        assert!(sample_superres(&d, &feats[..5], &lows, &s, &cfg).is_err());
    }

    #[test]
    fn invalid_constraint_is_rejected() {
        let cfg = SamplerConfig { constraint: Constraint { group: 3, strength: 0.0 }, ..SamplerConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
