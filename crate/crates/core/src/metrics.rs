//! Similarity metrics between real and generated BOLD data, signal-to-noise
//! estimation and a cross-validated linear classifier.

use ndarray::{s, Array, Array1, Array2, Dimension};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CatdError, Result};
use crate::nn::seeded_rng;

pub const SSIM_WINDOW: usize = 8;
pub const SNR_WINDOW: usize = 5;
/// Reported in place of an infinite SNR.
pub const SNR_CAP_DB: f64 = 120.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub ssim: f64,
    pub cosine_similarity: f64,
    pub ccc: f64,
    pub snr_db_real: f64,
    pub snr_db_synthetic: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub struct CVResult {
    pub acc: f64,
    pub pre: f64,
    pub sen: f64,
    pub f1: f64,
    pub folds: Vec<FoldScores>,
    /// Fold index of every sample.
    pub assignment: Vec<usize>,
}

fn check_shapes<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(input_err(format!("shape {:?} does not match {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(input_err("empty input"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(input_err("non-finite values"));
    }
    Ok(())
}

pub fn rmse<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(mse.sqrt())
}

/// Mean SSIM over every 8×8 window at stride 1. `range` defaults to the
/// joint max − min of both frames.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, range: Option<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(input_err(format!("frame {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let l = range.unwrap_or_else(|| {
        let (lo, hi) = a.iter().chain(b.iter()).fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    });
    let l = if l > 0.0 { l } else { 1.0 };
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let wa = a.slice(s![y..y + SSIM_WINDOW, x..x + SSIM_WINDOW]);
            let wb = b.slice(s![y..y + SSIM_WINDOW, x..x + SSIM_WINDOW]);
            let (ma, mb) = (wa.sum() / n, wb.sum() / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (p, q) in wa.iter().zip(wb.iter()) {
                va += (p - ma).powi(2);
                vb += (q - mb).powi(2);
                cov += (p - ma) * (q - mb);
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Average of a per-cell quantity with the number of cells left out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAverage {
    pub value: f64,
    pub excluded: usize,
}

/// Per-cell cosine similarity of `cell × time` series, averaged over cells
/// whose series are non-zero in both inputs.
pub fn cosine_similarity_ts(a: &Array2<f64>, b: &Array2<f64>) -> Result<CellAverage> {
    check_shapes(a, b)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        total += (ra.dot(&rb) / (na * nb)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(CatdError::UndefinedMetric("every cell series has zero norm".into()));
    }
    Ok(CellAverage { value: total / used as f64, excluded: a.nrows() - used })
}

fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
        cov += (x - ma) * (y - mb);
    }
    (ma, mb, va / n, vb / n, cov / n)
}

/// Concordance correlation with population moments.
pub fn ccc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(input_err("ccc needs two series of equal length ≥ 2"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(input_err("non-finite values"));
    }
    let (ma, mb, va, vb, cov) = moments(a, b);
    if va == 0.0 && vb == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    Ok((2.0 * cov / (va + vb + (ma - mb).powi(2))).clamp(-1.0, 1.0))
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (_, _, va, vb, cov) = moments(a, b);
    (va > 0.0 && vb > 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-cell CCC of `cell × time` series, averaged over cells.
pub fn ccc_cells(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        total += ccc(&ra.to_vec(), &rb.to_vec())?;
    }
    Ok(total / a.nrows() as f64)
}

/// Centred moving average; windows are truncated at the edges.
pub fn moving_average_centered(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub db: f64,
    /// Set when the residual had zero power and `db` holds the cap.
    pub capped: bool,
}

/// Ratio of smooth-component power to residual power in decibels, with the
/// smooth component a 5-sample centred moving average.
pub fn snr_db(series: &[f64]) -> Result<Snr> {
    if series.len() < SNR_WINDOW {
        return Err(input_err(format!("SNR needs at least {SNR_WINDOW} samples")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(input_err("non-finite values"));
    }
    let smooth = moving_average_centered(series, SNR_WINDOW);
    let n = series.len() as f64;
    let p_signal = smooth.iter().map(|v| v * v).sum::<f64>() / n;
    let p_noise = series.iter().zip(&smooth).map(|(x, m)| (x - m).powi(2)).sum::<f64>() / n;
    if p_noise == 0.0 || p_noise < p_signal * 1e-12 {
        return Ok(Snr { db: SNR_CAP_DB, capped: true });
    }
    if p_signal == 0.0 {
        return Err(CatdError::UndefinedMetric("smooth component has zero power".into()));
    }
    Ok(Snr { db: (10.0 * (p_signal / p_noise).log10()).min(SNR_CAP_DB), capped: false })
}

/// Mean SNR over the rows of a `cell × time` matrix, skipping cells whose
/// estimate is undefined.
pub fn snr_db_cells(series: &Array2<f64>) -> Result<f64> {
    let values: Vec<f64> = series.rows().into_iter().filter_map(|r| snr_db(&r.to_vec()).ok()).map(|s| s.db).collect();
    if values.is_empty() {
        return Err(CatdError::UndefinedMetric("no cell has a defined SNR".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Gathers a frame sequence (`frames × h × w`) into `cell × time`.
pub fn cells_by_time(frames: &ndarray::Array3<f64>) -> Array2<f64> {
    let (t, h, w) = frames.dim();
    Array2::from_shape_fn((h * w, t), |(c, k)| frames[[k, c / w, c % w]])
}

pub fn metric_report(real: &ndarray::Array3<f64>, generated: &ndarray::Array3<f64>) -> Result<MetricReport> {
    check_shapes(real, generated)?;
    let (t, _, _) = real.dim();
    let mut ssim_total = 0.0;
    for k in 0..t {
        let a = real.index_axis(ndarray::Axis(0), k).to_owned();
        let b = generated.index_axis(ndarray::Axis(0), k).to_owned();
        ssim_total += ssim(&a, &b, None)?;
    }
    let (ra, ga) = (cells_by_time(real), cells_by_time(generated));
    Ok(MetricReport {
        rmse: rmse(real, generated)?,
        ssim: ssim_total / t as f64,
        cosine_similarity: cosine_similarity_ts(&ra, &ga)?.value,
        ccc: ccc_cells(&ra, &ga)?,
        snr_db_real: snr_db_cells(&ra)?,
        snr_db_synthetic: snr_db_cells(&ga)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub folds: usize,
    pub iterations: usize,
    /// Upper bound on the step size. The fit uses at most `1 / L`, where `L`
    /// bounds the curvature of the loss, so gradient descent cannot oscillate
    /// on many collinear features.
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { folds: 5, iterations: 300, lr: 0.5, l2: 1e-3, seed: 0 }
    }
}

/// Stratified fold index for every sample: each class is shuffled and dealt
/// round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            fold[i] = (offset + j) % k;
        }
        offset += idx.len();
    }
    fold
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// L2-penalised logistic regression by full-batch gradient descent on
/// standardised features. Returns `(weights, bias, mean, scale)`.
fn fit_logistic(x: &Array2<f64>, y: &[bool], cfg: &ClassifierConfig) -> (Array1<f64>, f64, Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let scale = x.std_axis(ndarray::Axis(0), 0.0).mapv(|s| if s > 0.0 { 1.0 / s } else { 1.0 });
    let z = (x - &mean) * &scale;
    let target = Array1::from_iter(y.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    let lr = cfg.lr.min(1.0 / curvature_bound(&z, cfg.l2));
    let mut w = Array1::zeros(x.ncols());
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let p = (z.dot(&w) + b).mapv(sigmoid);
        let r = &p - &target;
        let gw = z.t().dot(&r) / n + &w * cfg.l2;
        let gb = r.sum() / n;
        w = w - gw * lr;
        b -= gb * lr;
    }
    (w, b, mean, scale)
}

/// Largest curvature of the mean logistic loss over `[z, 1]`:
/// `max(λ_max(zᵀz / n), 1) / 4 + l2`. Columns of `z` are centred, so the bias
/// column is orthogonal to them. `λ_max` comes from power iteration on the
/// smaller Gram matrix.
fn curvature_bound(z: &Array2<f64>, l2: f64) -> f64 {
    let n = z.nrows() as f64;
    let gram = if z.nrows() <= z.ncols() { z.dot(&z.t()) } else { z.t().dot(z) } / n;
    // A ramp: the all-ones vector is in the null space of the centred Gram.
    let mut v = Array1::from_shape_fn(gram.nrows(), |i| (i + 1) as f64);
    v /= v.dot(&v).sqrt();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let next = gram.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = next / norm;
    }
    lambda.max(1.0) / 4.0 + l2
}

const POWER_ITERATIONS: usize = 200;

pub fn scores(truth: &[bool], predicted: &[bool]) -> FoldScores {
    let (mut tp, mut fp, mut fneg, mut correct) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fneg += 1.0,
            _ => {}
        }
        if t == p {
            correct += 1.0;
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let pre = ratio(tp, tp + fp);
    let sen = ratio(tp, tp + fneg);
    FoldScores { acc: ratio(correct, truth.len() as f64), pre, sen, f1: ratio(2.0 * pre * sen, pre + sen) }
}

/// Stratified k-fold logistic regression with `true` ("task") as the
/// positive class.
pub fn classify_kfold(features: &Array2<f64>, labels: &[bool], cfg: &ClassifierConfig) -> Result<CVResult> {
    if features.nrows() != labels.len() {
        return Err(input_err("feature rows and labels differ in count"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(input_err("non-finite features"));
    }
    let k = cfg.folds;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(input_err("classification needs both classes"));
    }
    if k < 2 || positives < k || negatives < k {
        return Err(input_err(format!("need at least {k} samples per class for {k} folds")));
    }
    let assignment = stratified_folds(labels, k, cfg.seed);
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == f).collect();
        let xt = features.select(ndarray::Axis(0), &train);
        let yt: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let (w, b, mean, scale) = fit_logistic(&xt, &yt, cfg);
        let xs = (features.select(ndarray::Axis(0), &test) - &mean) * &scale;
        let pred: Vec<bool> = (xs.dot(&w) + b).iter().map(|&z| z > 0.0).collect();
        let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        folds.push(scores(&truth, &pred));
    }
    let avg = |f: fn(&FoldScores) -> f64| folds.iter().map(f).sum::<f64>() / k as f64;
    Ok(CVResult {
        acc: avg(|s| s.acc),
        pre: avg(|s| s.pre),
        sen: avg(|s| s.sen),
        f1: avg(|s| s.f1),
        assignment,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_mat;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rmse_values() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert!((rmse(&array![0.0, 0.0], &array![3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&array![0.0, 0.0], &array![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ssim_identity_negation_and_shift() {
        let mut x = normal_mat(&mut seeded_rng(1), 12, 10, 1.0);
        let m = x.mean().unwrap();
        x -= m;
        assert!((ssim(&x, &x, None).unwrap() - 1.0).abs() < 1e-12);
        // Zero mean inside every 8×8 window: sums of period-2 alternations.
        let mut rng = seeded_rng(5);
        let (a, b, c): (f64, f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
        let sign = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
        let z = Array2::from_shape_fn((12, 10), |(i, j)| a * sign(i) + b * sign(j) + c * sign(i + j));
        assert!(ssim(&z, &(-&z), None).unwrap() < 0.0);
        let l = 2.0;
        assert!(ssim(&x, &(&x + l / 2.0), Some(l)).unwrap() < 1.0);
        assert!(ssim(&Array2::zeros((7, 9)), &Array2::zeros((7, 9)), None).is_err());
    }

    #[test]
    fn cosine_values() {
        let a = array![[1.0, 0.0], [1.0, 2.0]];
        let b = array![[0.0, 1.0], [2.0, 4.0]];
        let r = cosine_similarity_ts(&a, &b).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        assert!((cosine_similarity_ts(&array![[1.0, 2.0, 3.0]], &array![[2.0, 4.0, 6.0]]).unwrap().value - 1.0).abs() < 1e-12);
        let z = array![[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(cosine_similarity_ts(&z, &z).unwrap().excluded, 1);
        assert!(matches!(cosine_similarity_ts(&Array2::zeros((2, 2)), &Array2::zeros((2, 2))), Err(CatdError::UndefinedMetric(_))));
    }

    #[test]
    fn ccc_values() {
        let x = [0.3, 1.2, -0.7, 2.0];
        assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        // cov = −2/3, var_a = var_b = 2/3, equal means: 2(−2/3)/(4/3) = −1
        assert!((ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert!(ccc(&x, &shifted).unwrap() < 1.0);
        assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(ccc(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn snr_of_slow_sinusoid_in_white_noise() {
        let mut rng = seeded_rng(2);
        let n = 20_000;
        let sigma = 0.1;
        let slow: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 200.0).sin()).collect();
        let noisy: Vec<f64> = slow.iter().map(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let expected = 10.0 * (0.5 / (sigma * sigma)).log10();
        let got = snr_db(&noisy).unwrap();
        assert!((got.db - expected).abs() < 1.0, "{} vs {expected}", got.db);
    }

    #[test]
    fn snr_of_constant_is_capped() {
        let s = snr_db(&[3.0; 10]).unwrap();
        assert!(s.capped && s.db == SNR_CAP_DB);
        assert!(snr_db(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn snr_is_scale_invariant() {
        let x: Vec<f64> = normal_mat(&mut seeded_rng(3), 1, 50, 1.0).iter().copied().collect();
        let y: Vec<f64> = x.iter().map(|v| v * 7.5).collect();
        assert!((snr_db(&x).unwrap().db - snr_db(&y).unwrap().db).abs() < 1e-9);
    }

    fn clusters(n: usize, distance: f64, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = seeded_rng(seed);
        let mut x = normal_mat(&mut rng, n, 3, 1.0);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        for (i, &l) in labels.iter().enumerate() {
            if l {
                x[[i, 0]] += distance;
            }
        }
        (x, labels)
    }

    #[test]
    fn separated_clusters_classify_perfectly() {
        let (x, y) = clusters(100, 10.0, 4);
        let r = classify_kfold(&x, &y, &ClassifierConfig::default()).unwrap();
        assert!(r.acc >= 0.99, "{}", r.acc);
    }

    #[test]
    fn noise_features_give_chance_accuracy() {
        for seed in 0..5 {
            let (x, y) = clusters(200, 0.0, 10 + seed);
            let r = classify_kfold(&x, &y, &ClassifierConfig { seed, ..ClassifierConfig::default() }).unwrap();
            assert!((0.35..=0.65).contains(&r.acc), "seed {seed}: {}", r.acc);
        }
    }

    #[test]
    fn curvature_bound_of_repeated_column() {
        // p copies of one unit-variance column: zᵀz / n has the single eigenvalue p.
        let col = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        for p in [3, 40] {
            let z = Array2::from_shape_fn((6, p), |(i, _)| col[i]);
            assert!((curvature_bound(&z, 0.0) - p as f64 / 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_features_do_not_destabilise_the_fit() {
        // Hundreds of mixtures of a few latent factors, one weakly tied to the
        // label. A fixed step of 0.5 overshoots here and the loss climbs above
        // its starting value, ln 2.
        let mut rng = seeded_rng(8);
        let labels: Vec<bool> = (0..80).map(|i| i % 2 == 0).collect();
        let factors = Array2::from_shape_fn((80, 8), |(i, k)| {
            let shift = if k == 0 && labels[i] { 0.7 } else { 0.0 };
            shift + rng.random_range(-1.0..1.0)
        });
        let mixing = Array2::from_shape_fn((8, 300), |_| rng.random_range(-1.0..1.0));
        let x = factors.dot(&mixing).mapv(|v| v + 1e-3 * rng.random_range(-1.0..1.0));
        let cfg = ClassifierConfig::default();
        let (w, b, mean, scale) = fit_logistic(&x, &labels, &cfg);
        let logits = ((&x - &mean) * &scale).dot(&w) + b;
        let loss = logits
            .iter()
            .zip(&labels)
            .map(|(&z, &l)| if l { (1.0 + (-z).exp()).ln() } else { (1.0 + z.exp()).ln() })
            .sum::<f64>()
            / labels.len() as f64;
        assert!(loss < std::f64::consts::LN_2, "{loss}");
    }

    #[test]
    fn perfect_predictions_score_one() {
        let t = [true, false, true, true, false];
        let s = scores(&t, &t);
        assert_eq!((s.acc, s.pre, s.sen, s.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_is_input_error() {
        let x = Array2::zeros((10, 2));
        assert!(matches!(classify_kfold(&x, &[true; 10], &ClassifierConfig::default()), Err(CatdError::Input(_))));
    }

    #[test]
    fn report_of_identical_sessions() {
        let f = Array3::from_shape_fn((12, 8, 8), |(t, y, x)| ((t * 3 + y * 2 + x) as f64 * 0.37).sin());
        let r = metric_report(&f, &f).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12 && (r.ccc - 1.0).abs() < 1e-12);
        assert!((r.cosine_similarity - 1.0).abs() < 1e-12);
    }

    fn pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = seeded_rng(seed);
        let shift: f64 = rng.random_range(-2.0..2.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| shift + v * rng.random_range(-1.0..1.0)).collect();
        (a, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn bounded_metrics_stay_in_range(seed in 0u64..u64::MAX) {
            let (a, b) = pair(seed, 64);
            let c = ccc(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            if let Some(r) = pearson(&a, &b) {
                prop_assert!(c.abs() <= r.abs() + 1e-12);
            }
            let fa = Array2::from_shape_vec((8, 8), a.clone()).unwrap();
            let fb = Array2::from_shape_vec((8, 8), b.clone()).unwrap();
            let sv = ssim(&fa, &fb, None).unwrap();
            prop_assert!((-1.0..=1.0).contains(&sv));
            prop_assert!((sv - ssim(&fb, &fa, None).unwrap()).abs() < 1e-12);
            let cos = cosine_similarity_ts(&fa, &fb).unwrap().value;
            prop_assert!((-1.0..=1.0).contains(&cos));
            prop_assert!((cos - cosine_similarity_ts(&fb, &fa).unwrap().value).abs() < 1e-12);
        }

        #[test]
        fn rmse_is_a_metric(seed in 0u64..u64::MAX) {
            let mut rng = seeded_rng(seed);
            let [a, b, c] = [0, 1, 2].map(|_| normal_mat(&mut rng, 4, 4, 1.0));
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn folds_partition_samples(n in 10usize..80, seed in 0u64..1000) {
            let labels: Vec<bool> = (0..n).map(|i| (i * 7 + seed as usize) % 3 == 0).collect();
            let k = 5;
            let f = stratified_folds(&labels, k, seed);
            prop_assert_eq!(f.len(), n);
            prop_assert!(f.iter().all(|&i| i < k));
            let total: usize = (0..k).map(|j| f.iter().filter(|&&i| i == j).count()).sum();
            prop_assert_eq!(total, n);
        }
    }
}
