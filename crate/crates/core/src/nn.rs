//! Parameter storage, initialisation and the Adam update rule.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::tape::Mat;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of independent `N(0, std²)` draws.
pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Weight matrix with fan-in scaled normal initialisation.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        self.add(name, normal_mat(rng, rows, cols, std))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Overwrites values from a name-keyed source; every parameter must be
    /// present with the same shape.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Mat>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = lookup(name).ok_or_else(|| config_err(format!("checkpoint lacks parameter `{name}`")))?;
            if src.dim() != value.dim() {
                return Err(config_err(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, expected {:?}",
                    src.dim(),
                    value.dim()
                )));
            }
            value.assign(src);
        }
        Ok(())
    }

    pub fn zeroed(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.dim())).collect()
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            first: params.zeroed(),
            second: params.zeroed(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>]) {
        self.steps += 1;
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = &mut params.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}
