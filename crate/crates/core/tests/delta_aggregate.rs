mod common;

use common::*;
use lla_fusion::aggregate::{aggregate, within_classifier_block, AggregatedState, CrossPolicy};
use lla_fusion::delta::logit_gaussian;
use lla_fusion::laplace::LaplacePosterior;
use lla_fusion::linalg::{is_psd_with_jitter, numerical_rank, MvNormal};
use lla_fusion::rng::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[test]
fn zero_posterior_gives_zero_covariance() {
    let (model, _) = blobs_model(3, 2, &[5], 20, 1);
    let d = model.last_layer_param_count();
    let post = LaplacePosterior::from_covariance(&model, DMatrix::zeros(d, d), 1.0, 1.0).unwrap();
    let x = [0.3, 0.1];
    let lg = logit_gaussian(&post, &x, 0, 0).unwrap();
    assert_eq!(lg.cov.abs().max(), 0.0);
    assert_eq!(lg.mean, model.shifted_logits(&x).unwrap());
}

#[test]
fn isotropic_posterior_gives_scaled_gram() {
    let (model, _) = blobs_model(3, 2, &[5], 20, 2);
    let d = model.last_layer_param_count();
    let post = LaplacePosterior::from_covariance(&model, DMatrix::identity(d, d) * 0.3, 1.0, 1.0).unwrap();
    let x = [1.0, -0.5];
    let j = model.last_layer_jacobian(&x).unwrap();
    let lg = logit_gaussian(&post, &x, 0, 0).unwrap();
    assert!((lg.cov - j.transpose() * &j * 0.3).abs().max() < 1e-12);
}

#[test]
fn covariance_matches_finite_difference_route() {
    let mut r = test_rng(3);
    for _ in 0..30 {
        let model = random_model(&mut r);
        let d = model.last_layer_param_count();
        let a = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let cov = &a * a.transpose() / d as f64;
        let post = LaplacePosterior::from_covariance(&model, cov.clone(), 1.0, 1.0).unwrap();
        let x = random_input(&mut r, model.input_dim(), 2.0);
        let jfd = fd_shifted_jacobian(&model, &x, 1e-5);
        let reference = jfd.transpose() * &cov * &jfd;
        let lg = logit_gaussian(&post, &x, 0, 0).unwrap();
        let scale = reference.abs().max().max(1e-12);
        assert!((&lg.cov - &reference).abs().max() / scale < 1e-6);
    }
}

#[test]
fn covariance_matches_sampled_shifted_logits() {
    let (post, data) = scaled_posterior(3, 2, &[6], 1e-3, 4);
    let model = post.model();
    for i in [0, 17, 55] {
        let x = data.input(i);
        let shift = model.logits(x).unwrap().max();
        let samples = post.sample_parameters(100_000, 40 + i as u64).unwrap();
        let draws: Vec<DVector<f64>> = samples
            .iter()
            .map(|t| {
                model
                    .with_last_layer_params(t.as_slice())
                    .unwrap()
                    .logits(x)
                    .unwrap()
                    .add_scalar(-shift)
            })
            .collect();
        let (_, sample_cov) = sample_moments(&draws);
        let lg = logit_gaussian(&post, x, 0, 0).unwrap();
        let rel = (&sample_cov - &lg.cov).norm() / lg.cov.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }
}

#[test]
fn logit_covariance_is_psd_with_bounded_rank() {
    let mut r = test_rng(5);
    for _ in 0..500 {
        let model = random_model(&mut r);
        let d = model.last_layer_param_count();
        let a = DMatrix::from_fn(d, r.random_range(1..=d), |_, _| r.random_range(-1.0..1.0));
        let post = LaplacePosterior::from_covariance(&model, &a * a.transpose(), 1.0, 1.0).unwrap();
        let x = random_input(&mut r, model.input_dim(), 2.0);
        let lg = logit_gaussian(&post, &x, 0, 0).unwrap();
        assert!((&lg.cov - lg.cov.transpose()).abs().max() < 1e-10);
        assert!(is_psd_with_jitter(&lg.cov, 1e-12 * lg.cov.abs().max().max(1.0)));
        assert!(numerical_rank(&lg.cov, 1e-10) <= d.min(model.num_classes()));
        assert_eq!(lg.mean.max(), 0.0);
    }
}

#[test]
fn within_block_examples() {
    let (post, data) = scaled_posterior(3, 2, &[5], 1.0, 6);
    let (x, y) = (data.input(0), data.input(30));
    let same = within_classifier_block(&post, x, x).unwrap();
    assert!((same - logit_gaussian(&post, x, 0, 0).unwrap().cov).abs().max() < 1e-12);
    let ab = within_classifier_block(&post, x, y).unwrap();
    let ba = within_classifier_block(&post, y, x).unwrap();
    assert!((ab - ba.transpose()).abs().max() < 1e-12);
    let zero = post.scaled(0.0).unwrap();
    assert_eq!(within_classifier_block(&zero, x, y).unwrap().abs().max(), 0.0);
}

#[test]
fn aggregate_examples() {
    let (p1, data) = scaled_posterior(3, 2, &[5], 1.0, 7);
    let (p2, _) = scaled_posterior(3, 2, &[5], 1.0, 8);
    let x = data.input(3);

    let single = aggregate(std::slice::from_ref(&p1), &[x], CrossPolicy::Zero).unwrap();
    let lg = logit_gaussian(&p1, x, 0, 0).unwrap();
    assert_eq!(single.mean(), &lg.mean);
    assert!((single.cov() - &lg.cov).abs().max() < 1e-12);

    let pair = aggregate(&[p1.clone(), p2.clone()], &[x], CrossPolicy::Zero).unwrap();
    assert_eq!(pair.cov().view((0, 3), (3, 3)).abs().max(), 0.0);
    assert!((pair.cov().view((3, 3), (3, 3)) - logit_gaussian(&p2, x, 0, 1).unwrap().cov).abs().max() < 1e-12);

    let twice = aggregate(std::slice::from_ref(&p1), &[x, x], CrossPolicy::Zero).unwrap();
    let b = twice.cov().view((0, 0), (3, 3)).clone_owned();
    for (i, j) in [(0, 3), (3, 0), (3, 3)] {
        assert!((twice.cov().view((i, j), (3, 3)) - &b).abs().max() < 1e-12);
    }
    assert!(numerical_rank(twice.cov(), 1e-10) <= 3);
}

#[test]
fn shared_scalar_tends_to_zero_policy() {
    let (p1, data) = scaled_posterior(3, 2, &[5], 1.0, 9);
    let (p2, _) = scaled_posterior(3, 2, &[5], 1.0, 10);
    let xs = [data.input(0), data.input(50)];
    let posts = [p1, p2];
    let zero = aggregate(&posts, &xs, CrossPolicy::Zero).unwrap();
    let mut last = f64::INFINITY;
    for rho in [0.5, 0.1, 1e-3, 1e-6] {
        let s = aggregate(&posts, &xs, CrossPolicy::SharedScalar { rho }).unwrap();
        assert!(is_psd_with_jitter(s.cov(), 1e-10));
        let gap = (s.cov() - zero.cov()).abs().max();
        assert!(gap <= last);
        last = gap;
    }
    assert!(last < 1e-5);
}

#[test]
fn recover_offsets() {
    let mean = DVector::zeros(12);
    let state = AggregatedState::new(mean, DMatrix::identity(12, 12), 2, 2, 3).unwrap();
    let sample = DMatrix::from_fn(12, 1, |i, _| (i + 1) as f64);
    // classifier 0, input 1 in 0-based indexing
    assert_eq!(state.recover(1, 0, &sample).unwrap().as_slice(), &[4.0, 5.0, 6.0]);
    let single = AggregatedState::new(DVector::zeros(3), DMatrix::identity(3, 3), 1, 1, 3).unwrap();
    let s = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
    assert_eq!(single.recover(0, 0, &s).unwrap(), s);
}

#[test]
fn recovered_marginal_matches_block() {
    let (p1, data) = scaled_posterior(3, 2, &[5], 1.0, 11);
    let (p2, _) = scaled_posterior(3, 2, &[5], 1.0, 12);
    let state = aggregate(&[p1, p2], &[data.input(1), data.input(70)], CrossPolicy::Zero).unwrap();
    let mvn = MvNormal::new(state.mean().clone(), state.cov()).unwrap();
    let mut r = rng(77);
    let k = 100_000;
    let mut samples = DMatrix::zeros(state.dim(), k);
    for j in 0..k {
        samples.set_column(j, &mvn.sample(&mut r));
    }
    let block = state.recover(1, 1, &samples).unwrap();
    let draws: Vec<DVector<f64>> = block.column_iter().map(|c| c.clone_owned()).collect();
    let (mean, cov) = sample_moments(&draws);
    let target = state.marginal(1, 1);
    let sd = target.cov.diagonal().map(f64::sqrt);
    for i in 0..3 {
        assert!((mean[i] - target.mean[i]).abs() < 5.0 * sd[i] / (k as f64).sqrt() + 1e-12);
    }
    assert!((cov - &target.cov).norm() / target.cov.norm() < 0.03);
}
