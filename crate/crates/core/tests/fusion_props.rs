mod common;

use common::*;
use lla_fusion::aggregate::{aggregate, AggregatedState, CrossPolicy};
use lla_fusion::delta::{logit_gaussian, LogitGaussian};
use lla_fusion::fusion::*;
use lla_fusion::network::softmax;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn diag_block(mean: &[f64], var: &[f64]) -> LogitGaussian {
    LogitGaussian {
        mean: DVector::from_row_slice(mean),
        cov: DMatrix::from_diagonal(&DVector::from_row_slice(var)),
        classifier: 0,
        input: 0,
    }
}

#[test]
fn information_fusion_examples() {
    let s = AggregatedState::from_blocks(&[diag_block(&[0.0, -1.0], &[1.0, 1.0]), diag_block(&[-1.0, 0.0], &[3.0, 3.0])], 2, 1).unwrap();
    let f = fuse_information(&s).unwrap();
    assert!((f.cov - DMatrix::from_diagonal_element(2, 2, 0.75)).abs().max() < 1e-12);
    assert!((f.mean[0] + 0.25).abs() < 1e-12 && (f.mean[1] + 0.75).abs() < 1e-12);

    let p0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let a = LogitGaussian {
        mean: DVector::from_row_slice(&[0.0, -2.0]),
        cov: p0.clone(),
        classifier: 0,
        input: 0,
    };
    let b = LogitGaussian {
        mean: DVector::from_row_slice(&[-1.0, 0.0]),
        ..a.clone()
    };
    let f = fuse_information(&AggregatedState::from_blocks(&[a, b], 2, 1).unwrap()).unwrap();
    assert!((f.cov - p0 / 2.0).abs().max() < 1e-12);
    assert!((f.mean - DVector::from_row_slice(&[-0.5, -1.0])).abs().max() < 1e-12);
}

#[test]
fn single_block_is_identity() {
    let (post, data) = scaled_posterior(3, 2, &[5], 1.0, 1);
    let state = aggregate(std::slice::from_ref(&post), &[data.input(0)], CrossPolicy::Zero).unwrap();
    let f = fuse_information(&state).unwrap();
    let lg = logit_gaussian(&post, data.input(0), 0, 0).unwrap();
    assert_eq!(f.mean, lg.mean);
    assert!((f.cov - lg.cov).abs().max() <= 1e-12);
}

fn random_spd(m: usize, seed: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |i, j| seed[(i * m + j) % seed.len()]);
    &a * a.transpose() + DMatrix::identity(m, m) * 0.05
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_covariance_is_dominated(
        blocks in 2usize..5,
        m in 2usize..5,
        entries in prop::collection::vec(-2.0f64..2.0, 16),
        means in prop::collection::vec(-3.0f64..0.0, 20),
    ) {
        let gs: Vec<LogitGaussian> = (0..blocks)
            .map(|b| {
                let rot: Vec<f64> = entries.iter().map(|v| v * (1.0 + b as f64 * 0.37)).collect();
                LogitGaussian {
                    mean: DVector::from_fn(m, |i, _| means[(b * m + i) % means.len()]),
                    cov: random_spd(m, &rot),
                    classifier: b,
                    input: 0,
                }
            })
            .collect();
        let state = AggregatedState::from_blocks(&gs, blocks, 1).unwrap();
        let f = fuse_information(&state).unwrap();
        for g in &gs {
            prop_assert!(loewner_le(&f.cov, &g.cov, 1e-10));
        }
        // Reversing the block order changes nothing.
        let rev: Vec<LogitGaussian> = gs.iter().rev().cloned().collect();
        let f2 = fuse_information(&AggregatedState::from_blocks(&rev, blocks, 1).unwrap()).unwrap();
        prop_assert!((&f.mean - &f2.mean).abs().max() < 1e-10);
        prop_assert!((&f.cov - &f2.cov).abs().max() < 1e-10);
    }
}

#[test]
fn mc_pmf_examples() {
    let zero = FusedGaussian {
        mean: DVector::from_row_slice(&[0.0, -0.3, -2.0]),
        cov: DMatrix::zeros(3, 3),
    };
    let est = mc_pmf(&zero, 50, 1, true, Method::Lla).unwrap();
    let cloud = est.cloud.unwrap();
    for row in cloud.row_iter() {
        assert_eq!(row, cloud.row(0));
    }
    for (a, b) in est.pmf.iter().zip(softmax(zero.mean.as_slice())) {
        assert!((a - b).abs() < 1e-14);
    }

    let k = 100_000;
    let iso = FusedGaussian {
        mean: DVector::zeros(4),
        cov: DMatrix::identity(4, 4) * 2.0,
    };
    let est = mc_pmf(&iso, k, 2, true, Method::Lla).unwrap();
    let cloud = est.cloud.unwrap();
    for j in 0..4 {
        let col = cloud.column(j);
        let sd = col.variance().sqrt();
        assert!((est.pmf[j] - 0.25).abs() < 3.0 * sd / (k as f64).sqrt());
        assert!((col.mean() - est.pmf[j]).abs() < 1e-12);
    }

    let wide = FusedGaussian {
        mean: DVector::zeros(2),
        cov: DMatrix::identity(2, 2) * 4.0,
    };
    let est = mc_pmf(&wide, k, 3, true, Method::Lla).unwrap();
    assert!((est.pmf[0] - 0.5).abs() < 0.01);
    assert!(est.cloud.unwrap().column(0).variance() > 0.01);
}

#[test]
fn mc_pmf_error_shrinks_with_samples() {
    let g = FusedGaussian {
        mean: DVector::from_row_slice(&[0.0, -1.0, -0.5]),
        cov: DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, 0.1, 0.0, 0.1, 0.5]),
    };
    let k = 10_000;
    let runs: Vec<Vec<f64>> = (0..20).map(|s| mc_pmf(&g, k, s, false, Method::Lla).unwrap().pmf).collect();
    for j in 0..3 {
        let mean = runs.iter().map(|p| p[j]).sum::<f64>() / 20.0;
        let sd = (runs.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!(sd <= 0.6 / (k as f64).sqrt(), "class {j}: sd {sd}");
    }
}

#[test]
fn ella_examples() {
    let (post, data) = scaled_posterior(3, 2, &[5], 1.0, 2);
    let x = data.input(5);
    let state = aggregate(std::slice::from_ref(&post), &[x], CrossPolicy::Zero).unwrap();
    let a = ella_pmf(&state, &[1.0], 500, 9, false).unwrap();
    let b = mc_pmf(&FusedGaussian::from(state.marginal(0, 0)), 500, 9, false, Method::Ella).unwrap();
    assert_eq!(a.pmf, b.pmf);

    // All weight on one block of a block-diagonal state: that block's Gaussian.
    let s = AggregatedState::from_blocks(&[diag_block(&[0.0, -1.0], &[0.5, 0.5]), diag_block(&[-2.0, 0.0], &[1.0, 2.0])], 2, 1).unwrap();
    let sel = ella_pmf(&s, &[0.0, 1.0], 100_000, 4, false).unwrap();
    let direct = reference_mc_pmf(&DVector::from_row_slice(&[-2.0, 0.0]), &DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 2.0])), 100_000, 5);
    assert!(total_variation(&sel.pmf, &direct) < 0.01);

    let s = AggregatedState::from_blocks(&[diag_block(&[0.0, -10.0], &[0.01, 0.01]), diag_block(&[-10.0, 0.0], &[0.01, 0.01])], 2, 1).unwrap();
    let est = ella_pmf(&s, &uniform_weights(&s), 20_000, 6, false).unwrap();
    assert!((est.pmf[0] - 0.5).abs() < 0.01);
}

#[test]
fn ella_matches_linear_gaussian_oracle() {
    // Σ w_b ζ_b is Gaussian with mean Σ w_b ḡ_b and covariance W R Wᵀ.
    let (p1, data) = scaled_posterior(3, 2, &[5], 1.0, 3);
    let (p2, _) = scaled_posterior(3, 2, &[5], 1.0, 4);
    let state = aggregate(&[p1, p2], &[data.input(0), data.input(40)], CrossPolicy::SharedScalar { rho: 0.3 }).unwrap();
    let w = inverse_trace_weights(&state).unwrap();
    let m = 3;
    let wmat = DMatrix::from_fn(m, state.dim(), |i, j| if j % m == i { w[j / m] } else { 0.0 });
    let mean = &wmat * state.mean();
    let cov = &wmat * state.cov() * wmat.transpose();
    let k = 100_000;
    let est = ella_pmf(&state, &w, k, 8, false).unwrap();
    let oracle = reference_mc_pmf(&mean, &cov, k, 99);
    assert!(total_variation(&est.pmf, &oracle) < 0.01);
}

#[test]
fn product_and_pool_examples() {
    let p = product_fusion(&[vec![0.9, 0.1], vec![0.9, 0.1]]).unwrap();
    assert!((p[0] - 0.81 / 0.82).abs() < 1e-12);
    let mut prev = 0.0;
    for copies in 1..8 {
        let p = product_fusion(&vec![vec![0.6, 0.3, 0.1]; copies]).unwrap();
        let top = p.iter().cloned().fold(0.0, f64::max);
        assert!(top >= prev);
        prev = top;
    }
    let q = log_linear_pool(&[vec![0.9, 0.1], vec![0.1, 0.9]], &[0.5, 0.5]).unwrap();
    assert!((q[0] - 0.5).abs() < 1e-12);
    let same = log_linear_pool(&[vec![0.3, 0.7], vec![0.3, 0.7]], &[0.2, 0.8]).unwrap();
    assert!((same[0] - 0.3).abs() < 1e-12);
}

#[test]
fn delta_pmf_agrees_with_parameter_sampling_at_small_scale() {
    let (post, data) = scaled_posterior(3, 2, &[6], 1e-2, 5);
    let k = 100_000;
    for i in [0, 30, 70] {
        let x = data.input(i);
        let lg = logit_gaussian(&post, x, i, 0).unwrap();
        let delta = mc_pmf(&FusedGaussian::from(lg), k, 10 + i as u64, false, Method::Lla).unwrap();
        let param = post.parameter_space_pmf(x, k, 20 + i as u64, false).unwrap();
        assert!(total_variation(&delta.pmf, &param.pmf) < 0.02);
    }
}
