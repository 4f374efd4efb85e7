//! Delta-method Gaussian over the shifted logits of one classifier.
//!
//! For input `x` the shifted logits are linearised in the last-layer
//! parameters, giving `N(ḡ(x), J(x)ᵀ P^θ J(x))`. Covariances are formed from
//! the penultimate activations without materialising `J`: with
//! `U = P^θ J(x_j)` (one pass over `P^θ`), entry `(m, m')` of
//! `J(x_i)ᵀ P^θ J(x_j)` only touches output `m`'s rows of `U`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::linalg::symmetrize;
use crate::network::shift_logits;

/// Gaussian over one classifier's shifted logits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub classifier: usize,
    pub input: usize,
}

impl LogitGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `P^θ J(x_j)` as a `d × M` matrix, from the penultimate activations of `x_j`.
pub(crate) fn precision_times_jacobian(post: &LaplacePosterior, a: &DVector<f64>) -> DMatrix<f64> {
    let cov = post.cov_theta();
    let h = a.len();
    let m = post.num_classes();
    let d = cov.nrows();
    let mut u = DMatrix::<f64>::zeros(d, m);
    for k in 0..m {
        let mut col = u.column_mut(k);
        col.copy_from(&cov.column(h * m + k));
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                col.axpy(ai, &cov.column(k * h + i), 1.0);
            }
        }
    }
    u
}

/// `J(x_i)ᵀ U` given `U = P^θ J(x_j)`.
pub(crate) fn jacobian_transpose_times(a: &DVector<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    let h = a.len();
    let m = u.ncols();
    DMatrix::from_fn(m, m, |k, kk| {
        let mut s = u[(h * m + k, kk)];
        for (i, &ai) in a.iter().enumerate() {
            s += ai * u[(k * h + i, kk)];
        }
        s
    })
}

/// `J(x_i)ᵀ P^θ J(x_j)` from penultimate activations.
pub(crate) fn cross_covariance(post: &LaplacePosterior, a_i: &DVector<f64>, a_j: &DVector<f64>) -> DMatrix<f64> {
    jacobian_transpose_times(a_i, &precision_times_jacobian(post, a_j))
}

pub(crate) fn check_finite_activations(a: &DVector<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            msg: "non-finite last-layer Jacobian".into(),
            condition: f64::INFINITY,
        })
    }
}

/// Logit Gaussian from already computed penultimate activations.
pub fn logit_gaussian_from_penultimate(
    post: &LaplacePosterior,
    a: &DVector<f64>,
    input: usize,
    classifier: usize,
) -> Result<LogitGaussian> {
    if a.len() != post.model().penultimate_width() {
        return Err(Error::Dimension {
            expected: post.model().penultimate_width(),
            got: a.len(),
        });
    }
    check_finite_activations(a)?;
    let g = post.model().logits_from_penultimate(a, post.theta_hat_last().as_slice());
    let cov = symmetrize(&cross_covariance(post, a, a));
    Ok(LogitGaussian {
        mean: shift_logits(&g),
        cov,
        classifier,
        input,
    })
}

/// Delta-method Gaussian over the shifted logits of `post`'s model at `x`.
pub fn logit_gaussian(post: &LaplacePosterior, x: &[f64], input: usize, classifier: usize) -> Result<LogitGaussian> {
    let a = post.model().penultimate(x)?;
    logit_gaussian_from_penultimate(post, &a, input, classifier)
}
