//! Convolutional Gaussian VAE for cortical maps.
//!
//! Images travel through the tape as `(batch · height · width) × channels`
//! matrices. A convolution is an im2col gather followed by a matrix product.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LatentGrid;
use crate::error::{config_err, input_err, CatdError, Result};
use crate::nn::{normal_mat, seeded_rng, Adam, ParamId, ParamSet, SeededRng};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub map_height: usize,
    pub map_width: usize,
    pub latent_channels: usize,
    /// Number of stride-2 stages; the downsampling factor is `2^stages`.
    pub stages: usize,
    pub hidden: [usize; 2],
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { map_height: 32, map_width: 32, latent_channels: 4, stages: 2, hidden: [8, 16] }
    }
}

impl VaeConfig {
    pub fn factor(&self) -> usize {
        1 << self.stages
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        (self.map_height / self.factor(), self.map_width / self.factor(), self.latent_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if self.stages == 0 || self.map_height % f != 0 || self.map_width % f != 0 {
            return Err(config_err(format!(
                "map {}×{} not divisible by VAE factor {f}",
                self.map_height, self.map_width
            )));
        }
        let (lh, lw, lc) = self.latent_dims();
        if lh * lw * lc >= self.map_height * self.map_width {
            return Err(config_err("VAE latent must be smaller than the map"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeHyper {
    fn default() -> Self {
        VaeHyper { epochs: 40, batch: 16, lr: 2e-3, kl_weight: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
    cin: usize,
    cout: usize,
}

/// Spatial extent of an image batch on the tape.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    h: usize,
    w: usize,
}

impl Conv {
    fn new(params: &mut ParamSet, name: &str, k: usize, stride: usize, cin: usize, cout: usize, rng: &mut SeededRng) -> Self {
        let fan_in = k * k * cin;
        let w = params.add(format!("{name}.w"), normal_mat(rng, fan_in, cout, (2.0 / fan_in as f64).sqrt()));
        let b = params.add_zeros(&format!("{name}.b"), 1, cout);
        Conv { w, b, k, stride, cin, cout }
    }

    fn apply(&self, tape: &mut Tape, x: Var, g: Geom) -> (Var, Geom) {
        let pad = self.k / 2;
        let ho = (g.h + 2 * pad - self.k) / self.stride + 1;
        let wo = (g.w + 2 * pad - self.k) / self.stride + 1;
        let mut index = Vec::with_capacity(g.batch * ho * wo * self.k * self.k);
        for n in 0..g.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            let ix = (ox * self.stride + kx) as isize - pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w;
                            index.push(inside.then(|| n * g.h * g.w + iy as usize * g.w + ix as usize));
                        }
                    }
                }
            }
        }
        let cols = tape.gather(x, index, self.k * self.k);
        let out = tape.linear(cols, self.w, self.b);
        debug_assert_eq!(tape.value(out).ncols(), self.cout);
        debug_assert_eq!(tape.value(x).ncols(), self.cin);
        (out, Geom { h: ho, w: wo, ..g })
    }
}

fn upsample2(tape: &mut Tape, x: Var, g: Geom) -> (Var, Geom) {
    let (h2, w2) = (2 * g.h, 2 * g.w);
    let mut index = Vec::with_capacity(g.batch * h2 * w2);
    for n in 0..g.batch {
        for y in 0..h2 {
            for x in 0..w2 {
                index.push(Some(n * g.h * g.w + (y / 2) * g.w + x / 2));
            }
        }
    }
    (tape.gather(x, index, 1), Geom { h: h2, w: w2, ..g })
}

/// Encoder/decoder weights together with the latent normalisation constant.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamSet,
    /// Multiplier applied to latent means before diffusion.
    pub latent_scale: f64,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
}

/// Reconstruction and KL parts of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::default();
        let [c1, c2] = config.hidden;
        let lc = config.latent_channels;
        let mut encoder = vec![Conv::new(&mut params, "enc.stem", 3, 1, 1, c1, &mut rng)];
        let mut cin = c1;
        for s in 0..config.stages {
            encoder.push(Conv::new(&mut params, &format!("enc.down{s}"), 3, 2, cin, c2, &mut rng));
            cin = c2;
        }
        encoder.push(Conv::new(&mut params, "enc.head", 1, 1, c2, 2 * lc, &mut rng));

        let mut decoder = vec![Conv::new(&mut params, "dec.stem", 3, 1, lc, c2, &mut rng)];
        let mut cin = c2;
        for s in 0..config.stages {
            let cout = if s + 1 == config.stages { c1 } else { c2 };
            decoder.push(Conv::new(&mut params, &format!("dec.up{s}"), 3, 1, cin, cout, &mut rng));
            cin = cout;
        }
        decoder.push(Conv::new(&mut params, "dec.head", 3, 1, c1, 1, &mut rng));
        Ok(Vae { config, params, latent_scale: 1.0, encoder, decoder })
    }

    fn check_frame(&self, frame: &Array2<f64>) -> Result<()> {
        let want = (self.config.map_height, self.config.map_width);
        if frame.dim() != want {
            return Err(config_err(format!("frame {:?} does not match map {:?}", frame.dim(), want)));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &LatentGrid) -> Result<()> {
        if latent.dims() != self.config.latent_dims() {
            return Err(config_err(format!(
                "latent {:?} does not match {:?}",
                latent.dims(),
                self.config.latent_dims()
            )));
        }
        Ok(())
    }

    fn stack_frames(frames: &[&Array2<f64>]) -> Mat {
        let pixels = frames[0].len();
        let mut m = Mat::zeros((frames.len() * pixels, 1));
        for (i, f) in frames.iter().enumerate() {
            for (j, v) in f.iter().enumerate() {
                m[[i * pixels + j, 0]] = *v;
            }
        }
        m
    }

    /// Encoder pass; returns `(mean, logvar)` vars of shape
    /// `(batch · lh · lw) × latent_channels`.
    fn encode_tape(&self, tape: &mut Tape, x: Var, batch: usize) -> (Var, Var) {
        let mut g = Geom { batch, h: self.config.map_height, w: self.config.map_width };
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            let (out, geom) = conv.apply(tape, h, g);
            h = if i == last { out } else { tape.gelu(out) };
            g = geom;
        }
        let lc = self.config.latent_channels;
        (tape.slice_cols(h, 0, lc), tape.slice_cols(h, lc, lc))
    }

    fn decode_tape(&self, tape: &mut Tape, z: Var, batch: usize) -> Var {
        let (lh, lw, _) = self.config.latent_dims();
        let mut g = Geom { batch, h: lh, w: lw };
        let (mut h, geom) = self.decoder[0].apply(tape, z, g);
        h = tape.gelu(h);
        g = geom;
        for conv in &self.decoder[1..=self.config.stages] {
            let (up, ug) = upsample2(tape, h, g);
            let (out, og) = conv.apply(tape, up, ug);
            h = tape.gelu(out);
            g = og;
        }
        self.decoder[self.config.stages + 1].apply(tape, h, g).0
    }

    fn rows_to_grid(&self, m: &Mat, index: usize) -> LatentGrid {
        let (lh, lw, lc) = self.config.latent_dims();
        let block = m.slice(s![index * lh * lw..(index + 1) * lh * lw, ..]);
        LatentGrid { values: Array3::from_shape_fn((lh, lw, lc), |(y, x, c)| block[[y * lw + x, c]]) }
    }

    fn grid_rows(latents: &[&LatentGrid]) -> Mat {
        let (lh, lw, lc) = latents[0].dims();
        let mut m = Mat::zeros((latents.len() * lh * lw, lc));
        for (i, g) in latents.iter().enumerate() {
            for y in 0..lh {
                for x in 0..lw {
                    for c in 0..lc {
                        m[[i * lh * lw + y * lw + x, c]] = g.values[[y, x, c]];
                    }
                }
            }
        }
        m
    }

    pub fn encode(&self, frame: &Array2<f64>) -> Result<(LatentGrid, LatentGrid)> {
        Ok(self.encode_batch(&[frame])?.remove(0))
    }

    pub fn encode_batch(&self, frames: &[&Array2<f64>]) -> Result<Vec<(LatentGrid, LatentGrid)>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        for f in frames {
            self.check_frame(f)?;
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(Self::stack_frames(frames));
        let (mean, logvar) = self.encode_tape(&mut tape, x, frames.len());
        let (mv, lv) = (tape.value(mean), tape.value(logvar));
        Ok((0..frames.len()).map(|i| (self.rows_to_grid(mv, i), self.rows_to_grid(lv, i))).collect())
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<Array2<f64>> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[&LatentGrid]) -> Result<Vec<Array2<f64>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for l in latents {
            self.check_latent(l)?;
        }
        let mut tape = Tape::new(&self.params);
        let z = tape.constant(Self::grid_rows(latents));
        let out = self.decode_tape(&mut tape, z, latents.len());
        let (h, w) = (self.config.map_height, self.config.map_width);
        let v = tape.value(out);
        let frames: Vec<Array2<f64>> = (0..latents.len())
            .map(|i| Array2::from_shape_fn((h, w), |(y, x)| v[[i * h * w + y * w + x, 0]]))
            .collect();
        if frames.iter().flat_map(|f| f.iter()).any(|v| !v.is_finite()) {
            return Err(input_err("decoder produced non-finite values"));
        }
        Ok(frames)
    }

    /// Builds the objective on `tape` for a batch with fixed reparameterisation
    /// noise `xi` (`(batch · lh · lw) × latent_channels`).
    pub fn elbo_on_tape(&self, tape: &mut Tape, frames: &[&Array2<f64>], xi: &Mat, kl_weight: f64) -> (Var, Var, Var) {
        let batch = frames.len();
        let target = Self::stack_frames(frames);
        let x = tape.constant(target.clone());
        let (mean, logvar) = self.encode_tape(tape, x, batch);
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.constant(xi.clone());
        let spread = tape.mul(std, noise);
        let z = tape.add(mean, spread);
        let recon = self.decode_tape(tape, z, batch);
        let t = tape.constant(target);
        let diff = tape.sub(recon, t);
        let ss = tape.sum_squares(diff);
        let recon_loss = tape.scale(ss, 1.0 / (target_len(frames)) as f64);

        // KL(N(μ, e^lv) ‖ N(0, 1)) = ½ Σ (μ² + e^lv − 1 − lv)
        let mu2 = tape.sum_squares(mean);
        let var = tape.exp(logvar);
        let sv = tape.sum(var);
        let sl = tape.sum(logvar);
        let a = tape.add(mu2, sv);
        let b = tape.sub(a, sl);
        let n = tape.value(mean).len() as f64;
        let offset = tape.constant(Mat::from_elem((1, 1), -n));
        let c = tape.add(b, offset);
        let kl = tape.scale(c, 0.5 / batch as f64);
        let weighted = tape.scale(kl, kl_weight);
        let total = tape.add(recon_loss, weighted);
        (total, recon_loss, kl)
    }

    pub fn latent_noise(&self, batch: usize, rng: &mut SeededRng) -> Mat {
        let (lh, lw, lc) = self.config.latent_dims();
        normal_mat(rng, batch * lh * lw, lc, 1.0)
    }

    /// Objective for one frame with the given reparameterisation noise.
    pub fn elbo_loss(&self, frame: &Array2<f64>, xi: &Mat, kl_weight: f64) -> Result<ElboTerms> {
        self.check_frame(frame)?;
        let mut tape = Tape::new(&self.params);
        let (total, recon, kl) = self.elbo_on_tape(&mut tape, &[frame], xi, kl_weight);
        Ok(ElboTerms {
            reconstruction: tape.value(recon)[[0, 0]],
            kl: tape.value(kl)[[0, 0]],
            total: tape.value(total)[[0, 0]],
        })
    }
}

fn target_len(frames: &[&Array2<f64>]) -> usize {
    frames.iter().map(|f| f.len()).sum()
}

/// KL divergence of `N(mean, exp(logvar))` from the standard normal, summed
/// over elements.
pub fn gaussian_kl(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter().zip(logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// Trains a VAE; returns it with the mean objective of every epoch.
pub fn train_vae(frames: &[Array2<f64>], config: VaeConfig, hyper: &VaeHyper) -> Result<(Vae, Vec<f64>)> {
    if frames.is_empty() {
        return Err(input_err("VAE training set is empty"));
    }
    let mut vae = Vae::new(config, hyper.seed)?;
    for f in frames {
        vae.check_frame(f)?;
    }
    let mut rng = seeded_rng(hyper.seed ^ 0x5641_4500);
    let mut opt = Adam::new(&vae.params, hyper.lr);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let batch = hyper.batch.max(1);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &frames[i]).collect();
            let xi = vae.latent_noise(refs.len(), &mut rng);
            let grads = {
                let mut tape = Tape::new(&vae.params);
                let (loss, _, _) = vae.elbo_on_tape(&mut tape, &refs, &xi, hyper.kl_weight);
                let value = tape.value(loss)[[0, 0]];
                if !value.is_finite() {
                    return Err(CatdError::TrainingDivergence {
                        step: epoch,
                        diagnostic: format!("VAE objective became {value}"),
                    });
                }
                total += value * refs.len() as f64;
                tape.backward(loss).into_params()
            };
            opt.step(&mut vae.params, &grads);
        }
        history.push(total / frames.len() as f64);
    }
    Ok((vae, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeConfig {
        VaeConfig { map_height: 8, map_width: 8, latent_channels: 2, stages: 1, hidden: [3, 4] }
    }

    fn frame(h: usize, w: usize, phase: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| (y as f64 * 0.7 + x as f64 * 0.4 + phase).sin())
    }

    #[test]
    fn shapes_follow_the_factor() {
        let vae = Vae::new(VaeConfig::default(), 0).unwrap();
        let (m, lv) = vae.encode(&frame(32, 32, 0.0)).unwrap();
        assert_eq!(m.dims(), (8, 8, 4));
        assert_eq!(lv.dims(), (8, 8, 4));
        assert_eq!(vae.decode(&m).unwrap().dim(), (32, 32));
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let vae = Vae::new(small(), 3).unwrap();
        let f = frame(8, 8, 0.3);
        let a = vae.encode(&f).unwrap();
        let b = vae.encode(&f).unwrap();
        assert_eq!(a, b);
        assert_eq!(vae.decode(&a.0).unwrap(), vae.decode(&a.0).unwrap());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let vae = Vae::new(small(), 0).unwrap();
        assert!(matches!(vae.encode(&Array2::zeros((7, 8))), Err(CatdError::Config(_))));
        let bad = LatentGrid { values: Array3::zeros((3, 4, 2)) };
        assert!(vae.decode(&bad).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((gaussian_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elbo_terms_are_non_negative() {
        let vae = Vae::new(small(), 5).unwrap();
        let xi = vae.latent_noise(1, &mut seeded_rng(1));
        let terms = vae.elbo_loss(&frame(8, 8, 1.0), &xi, 1e-3).unwrap();
        assert!(terms.reconstruction >= 0.0 && terms.kl >= 0.0 && terms.total >= 0.0);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut vae = Vae::new(small(), 9).unwrap();
        let f = frame(8, 8, 0.5);
        let xi = vae.latent_noise(1, &mut seeded_rng(2));
        let grads = {
            let mut tape = Tape::new(&vae.params);
            let (loss, _, _) = vae.elbo_on_tape(&mut tape, &[&f], &xi, 0.1);
            tape.backward(loss).into_params()
        };
        let mut rng = seeded_rng(77);
        let ids: Vec<ParamId> = vae.params.ids().collect();
        let h = 1e-5;
        let mut checked = 0;
        for &id in &ids {
            let n = vae.params.get(id).len();
            for _ in 0..3 {
                let k = rand::Rng::random_range(&mut rng, 0..n);
                let analytic = grads[id.0].as_ref().unwrap().as_slice().unwrap()[k];
                let orig = vae.params.get(id).as_slice().unwrap()[k];
                let mut eval = |v: f64| {
                    vae.params.get_mut(id).as_slice_mut().unwrap()[k] = v;
                    vae.elbo_loss(&f, &xi, 0.1).unwrap().total
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                eval(orig);
                let scale = analytic.abs().max(numeric.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!((analytic - numeric).abs() <= 1e-4 * scale, "{}[{k}]: {analytic} vs {numeric}", vae.params.name(id));
                checked += 1;
            }
        }
        assert!(checked >= ids.len());
    }

    #[test]
    fn empty_training_set_is_input_error() {
        assert!(matches!(train_vae(&[], small(), &VaeHyper::default()), Err(CatdError::Input(_))));
    }

    #[test]
    fn training_reduces_the_objective() {
        let frames: Vec<_> = (0..24).map(|i| frame(8, 8, i as f64 * 0.25)).collect();
        let hyper = VaeHyper { epochs: 30, batch: 8, lr: 5e-3, ..VaeHyper::default() };
        let (_, history) = train_vae(&frames, small(), &hyper).unwrap();
        let head: f64 = history[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = history[20..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
