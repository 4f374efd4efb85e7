#![allow(clippy::needless_range_loop)]

//! Independent reference implementations used by the integration tests and
//! the acceptance harness. Everything here is written as plain loops over
//! the definitions, without the structured shortcuts the library takes.
#![allow(dead_code)]

use lla_fusion::dataset::{make_blobs, LabeledSet};
use lla_fusion::laplace::LaplacePosterior;
use lla_fusion::network::{softmax, train_map, MlpClassifier, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_input(r: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| r.random_range(-scale..scale)).collect()
}

/// A random model with random widths, for property checks.
pub fn random_model(r: &mut ChaCha8Rng) -> MlpClassifier {
    let depth = r.random_range(1..=3);
    let mut dims = vec![r.random_range(1..=6)];
    for _ in 0..depth {
        dims.push(r.random_range(2..=8));
    }
    dims.push(r.random_range(2..=5));
    let mut m = MlpClassifier::init(&dims, r.random()).unwrap();
    // Nonzero biases so the penultimate layer is not trivially sparse.
    let mut p = m.params();
    for v in p.iter_mut() {
        *v += r.random_range(-0.1..0.1);
    }
    m = MlpClassifier::from_params(&dims, m.activation(), &p, m.seed()).unwrap();
    m
}

/// Blob data and a model trained on it.
pub fn blobs_model(classes: usize, dim: usize, hidden: &[usize], per_class: usize, seed: u64) -> (MlpClassifier, LabeledSet) {
    let data = make_blobs(classes, per_class, dim, 4.0, seed).unwrap();
    let mut arch = vec![dim];
    arch.extend(hidden);
    arch.push(classes);
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 5e-3,
        seed: seed ^ 0xA5A5,
        ..TrainConfig::default()
    };
    (train_map(&data, &arch, &cfg).unwrap().0, data)
}

/// Central finite differences of the raw logits with respect to the
/// last-layer parameters.
pub fn fd_jacobian(model: &MlpClassifier, x: &[f64], step: f64) -> DMatrix<f64> {
    let theta = model.last_layer_params();
    let d = theta.len();
    let m = model.num_classes();
    let mut j = DMatrix::zeros(d, m);
    for i in 0..d {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += step;
        minus[i] -= step;
        let gp = model.with_last_layer_params(plus.as_slice()).unwrap().logits(x).unwrap();
        let gm = model.with_last_layer_params(minus.as_slice()).unwrap().logits(x).unwrap();
        for k in 0..m {
            j[(i, k)] = (gp[k] - gm[k]) / (2.0 * step);
        }
    }
    j
}

/// Finite-difference Jacobian of the shifted logits, the shift being the
/// constant offset taken at the MAP parameters.
pub fn fd_shifted_jacobian(model: &MlpClassifier, x: &[f64], step: f64) -> DMatrix<f64> {
    let g0 = model.logits(x).unwrap();
    let shift = g0.max();
    let theta = model.last_layer_params();
    let d = theta.len();
    let m = model.num_classes();
    let mut j = DMatrix::zeros(d, m);
    for i in 0..d {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += step;
        minus[i] -= step;
        let gp = model.with_last_layer_params(plus.as_slice()).unwrap().logits(x).unwrap().add_scalar(-shift);
        let gm = model.with_last_layer_params(minus.as_slice()).unwrap().logits(x).unwrap().add_scalar(-shift);
        for k in 0..m {
            j[(i, k)] = (gp[k] - gm[k]) / (2.0 * step);
        }
    }
    j
}

/// `Σ_n Σ_m f_m(1 − f_m) J_m J_mᵀ` with dense Jacobians.
pub fn dense_fisher(model: &MlpClassifier, data: &LabeledSet) -> DMatrix<f64> {
    let d = model.last_layer_param_count();
    let mut f = DMatrix::zeros(d, d);
    for x in data.inputs() {
        let j = model.last_layer_jacobian(x).unwrap();
        let p = model.predict(x).unwrap();
        for m in 0..model.num_classes() {
            let col = j.column(m);
            f += (col * col.transpose()) * (p[m] * (1.0 - p[m]));
        }
    }
    f
}

/// Sample mean and covariance of the columns of `samples` (one draw per row).
pub fn sample_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0))
}

/// `true` when `a − b + jitter·I` admits a Cholesky factor, i.e. `b ⪯ a` up to jitter.
pub fn loewner_le(b: &DMatrix<f64>, a: &DMatrix<f64>, jitter: f64) -> bool {
    let mut diff = a - b;
    diff = (&diff + diff.transpose()) * 0.5;
    for i in 0..diff.nrows() {
        diff[(i, i)] += jitter;
    }
    diff.cholesky().is_some()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Monte Carlo `E[softmax(z)]`, `z ~ N(mean, cov)`, via nalgebra's Cholesky
/// and rand_distr directly.
pub fn reference_mc_pmf(mean: &DVector<f64>, cov: &DMatrix<f64>, k: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut jittered = cov.clone();
    for i in 0..cov.nrows() {
        jittered[(i, i)] += 1e-14;
    }
    let l = jittered.cholesky().unwrap().l();
    let mut r = test_rng(seed);
    let m = mean.len();
    let mut acc = vec![0.0; m];
    for _ in 0..k {
        let e = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut r));
        let z = mean + &l * e;
        for (a, p) in acc.iter_mut().zip(softmax(z.as_slice())) {
            *a += p;
        }
    }
    acc.iter().map(|a| a / k as f64).collect()
}

pub fn argmax_ref(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Expected calibration error straight from the definition: for each bin,
/// scan all items in order.
pub fn brute_ece(preds: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let n = preds.len() as f64;
    let mut ece = 0.0;
    for j in 0..bins {
        let lo = j as f64 / bins as f64;
        let hi = (j + 1) as f64 / bins as f64;
        let mut count = 0usize;
        let mut correct = 0usize;
        let mut conf_sum = 0.0;
        for (p, &y) in preds.iter().zip(labels) {
            let k = argmax_ref(p);
            let conf = p[k];
            let inside = conf >= lo && (conf < hi || (j + 1 == bins && conf <= hi));
            if inside {
                count += 1;
                conf_sum += conf;
                if k == y {
                    correct += 1;
                }
            }
        }
        if count > 0 {
            let c = count as f64;
            ece += c / n * (correct as f64 / c - conf_sum / c).abs();
        }
    }
    ece
}

pub fn brute_brier(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        for m in 0..p.len() {
            let delta = if m == y { 1.0 } else { 0.0 };
            s += (delta - p[m]) * (delta - p[m]);
        }
    }
    s / preds.len() as f64
}

pub fn brute_nll(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        s += p[y].ln();
    }
    -s / preds.len() as f64
}

/// Probability that an in-distribution score is below an out-of-distribution
/// one, ties counting one half, over all pairs.
pub fn brute_auroc(inn: &[f64], out: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in inn {
        for b in out {
            if a < b {
                s += 1.0;
            } else if a == b {
                s += 0.5;
            }
        }
    }
    s / (inn.len() * out.len()) as f64
}

/// Step-wise area under precision/recall with "score ≤ τ ⇒ in-distribution",
/// sweeping τ over the distinct scores.
pub fn brute_aupr(inn: &[f64], out: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = inn.iter().chain(out).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let tp = inn.iter().filter(|&&s| s <= t).count() as f64;
        let fp = out.iter().filter(|&&s| s <= t).count() as f64;
        let recall = tp / inn.len() as f64;
        let precision = tp / (tp + fp);
        area += (recall - prev) * precision;
        prev = recall;
    }
    area
}

/// Random PMFs on `m` classes with labels; a share of items get tied or
/// one-hot predictions to exercise edge cases.
pub fn random_prediction_set(r: &mut ChaCha8Rng, n: usize, m: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut preds = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = r.random_range(0..10);
        let p = match kind {
            0 => {
                let mut p = vec![0.0; m];
                p[r.random_range(0..m)] = 1.0;
                p
            }
            1 => vec![1.0 / m as f64; m],
            _ => {
                let scale = r.random_range(0.1..6.0);
                let z: Vec<f64> = (0..m).map(|_| r.random_range(-scale..scale)).collect();
                softmax(&z)
            }
        };
        preds.push(p);
        labels.push(r.random_range(0..m));
    }
    (preds, labels)
}

/// A posterior over a trained blob model, with its covariance scaled.
pub fn scaled_posterior(classes: usize, dim: usize, hidden: &[usize], scale: f64, seed: u64) -> (LaplacePosterior, LabeledSet) {
    let (model, data) = blobs_model(classes, dim, hidden, 40, seed);
    let post = LaplacePosterior::fit(&model, &data, 1.0, 1.0).unwrap().scaled(scale).unwrap();
    (post, data)
}
