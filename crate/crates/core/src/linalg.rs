//! Dense linear algebra helpers shared by the Laplace, aggregation and fusion
//! code: Cholesky with a bounded jitter ladder, a semidefinite Cholesky for
//! sampling, PSD projection and a multivariate normal sampler.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, Rng};

/// Diagonal jitter tried, in order, when a Cholesky factorization fails. Each
/// step is relative to the mean absolute diagonal of the matrix (or absolute
/// when the diagonal is zero).
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-9, 1e-6];

/// A successful Cholesky factorization together with the jitter it needed.
pub struct Factorization {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute value added to the diagonal, `0.0` when none was needed.
    pub jitter: f64,
}

fn diag_scale(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1) as f64;
    let s = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Ratio of the largest to the smallest absolute eigenvalue of the symmetric
/// part of `a`. Infinite for singular or non-finite input.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky of a symmetric matrix, escalating through [`JITTER_LADDER`].
pub fn cholesky_with_jitter(a: &DMatrix<f64>, what: &str) -> Result<Factorization> {
    if !a.is_square() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: format!("{what}: matrix has non-finite entries"),
            condition: f64::INFINITY,
        });
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(Factorization { chol, jitter: 0.0 });
    }
    let scale = diag_scale(a);
    for step in JITTER_LADDER {
        let jitter = step * scale;
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(b) {
            return Ok(Factorization { chol, jitter });
        }
    }
    Err(Error::Numerical {
        msg: format!("{what}: Cholesky failed after jitter {:e}", JITTER_LADDER[2] * scale),
        condition: condition_estimate(a),
    })
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..a.ncols() {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Lower-triangular `L` with `L Lᵀ = a` for a symmetric positive semidefinite
/// matrix. Pivots at or below `1e-12 · max diag` are treated as exact zeros,
/// which makes rank-deficient and all-zero covariances sampleable without
/// jitter. Fails when a pivot is clearly negative.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: "covariance has non-finite entries".into(),
            condition: f64::INFINITY,
        });
    }
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)]));
    let zero_tol = 1e-12 * max_diag;
    let neg_tol = 1e-8 * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if s > zero_tol {
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / d;
            }
        } else if s < -neg_tol {
            return Err(Error::Numerical {
                msg: format!("covariance is not positive semidefinite (pivot {s:e} at {j})"),
                condition: condition_estimate(a),
            });
        }
    }
    Ok(l)
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero. Matrices that are already PSD are returned unchanged.
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

/// `true` when `a + jitter·I` admits a Cholesky factorization.
pub fn is_psd_with_jitter(a: &DMatrix<f64>, jitter: f64) -> bool {
    let mut b = symmetrize(a);
    for i in 0..b.nrows() {
        b[(i, i)] += jitter;
    }
    Cholesky::new(b).is_some()
}

/// Numerical rank: eigenvalues above `rel_tol · max |λ|`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = SymmetricEigen::new(symmetrize(a));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    eig.eigenvalues
        .iter()
        .filter(|v| v.abs() > rel_tol * max)
        .count()
}

/// Packs the lower triangle row by row: `(0,0), (1,0), (1,1), (2,0), ...`.
pub fn pack_lower(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Inverse of [`pack_lower`], returning the lower-triangular matrix.
pub fn unpack_lower(n: usize, packed: &[f64]) -> Result<DMatrix<f64>> {
    if packed.len() != n * (n + 1) / 2 {
        return Err(Error::Dimension {
            expected: n * (n + 1) / 2,
            got: packed.len(),
        });
    }
    let mut a = DMatrix::zeros(n, n);
    let mut it = packed.iter();
    for i in 0..n {
        for j in 0..=i {
            a[(i, j)] = *it.next().unwrap();
        }
    }
    Ok(a)
}

/// Symmetric matrix from a packed lower triangle.
pub fn unpack_symmetric(n: usize, packed: &[f64]) -> Result<DMatrix<f64>> {
    let mut a = unpack_lower(n, packed)?;
    for i in 0..n {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    Ok(a)
}

/// Multivariate normal sampler backed by a semidefinite Cholesky factor.
///
/// A draw consumes `dim` standard normals from the generator, in order, and
/// returns `mean + L·ε`. Rows of `L` are stored from their first nonzero
/// column, so block-diagonal covariances cost only their blocks.
#[derive(Debug, Clone)]
pub struct MvNormal {
    mean: DVector<f64>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MvNormal {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        let l = psd_factor(cov)?;
        Ok(Self::from_factor(mean, &l))
    }

    /// Uses a precomputed lower-triangular factor as is.
    pub fn from_factor(mean: DVector<f64>, l: &DMatrix<f64>) -> Self {
        let n = mean.len();
        let rows = (0..n)
            .map(|i| {
                let start = (0..=i).find(|&j| l[(i, j)] != 0.0).unwrap_or(i + 1);
                (start, (start..=i).map(|j| l[(i, j)]).collect())
            })
            .collect();
        MvNormal { mean, rows }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Draws one sample into `out`, using `eps` as scratch for the normals.
    pub fn sample_into(&self, rng: &mut Rng, eps: &mut [f64], out: &mut [f64]) {
        fill_standard_normal(rng, eps);
        for (i, (start, row)) in self.rows.iter().enumerate() {
            let mut acc = self.mean[i];
            for (l, e) in row.iter().zip(&eps[*start..]) {
                acc += l * e;
            }
            out[i] = acc;
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let mut eps = vec![0.0; self.dim()];
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, &mut eps, out.as_mut_slice());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn psd_factor_reproduces_full_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 2.0]);
        let l = psd_factor(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-12);
    }

    #[test]
    fn psd_factor_handles_rank_deficiency() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let a = &v * v.transpose();
        let l = psd_factor(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-12);
        assert_eq!(psd_factor(&DMatrix::zeros(3, 3)).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn psd_factor_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_factor(&a), Err(Error::Numerical { .. })));
    }

    #[test]
    fn jitter_ladder_repairs_singular() {
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let a = &v * v.transpose();
        let f = cholesky_with_jitter(&a, "test").unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-6 * 1.0);
    }

    #[test]
    fn jitter_ladder_gives_up_on_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&a, "x"), Err(Error::Numerical { .. })));
    }

    #[test]
    fn projection_clips_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&a);
        assert!(is_psd_with_jitter(&p, 1e-12));
        let expected = DMatrix::from_element(2, 2, 1.5);
        assert!((p - expected).abs().max() < 1e-12);
    }

    #[test]
    fn packing_round_trips() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0]);
        let packed = pack_lower(&a);
        assert_eq!(packed, vec![1.0, 2.0, 5.0, 3.0, 6.0, 9.0]);
        assert_eq!(unpack_symmetric(3, &packed).unwrap(), a);
    }

    #[test]
    fn block_diagonal_sampler_matches_dense_product() {
        let mut cov = DMatrix::zeros(4, 4);
        cov[(0, 0)] = 2.0;
        cov[(1, 1)] = 1.0;
        cov[(0, 1)] = 0.5;
        cov[(1, 0)] = 0.5;
        cov[(2, 2)] = 3.0;
        cov[(3, 3)] = 1.0;
        cov[(2, 3)] = -0.2;
        cov[(3, 2)] = -0.2;
        let mean = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let mvn = MvNormal::new(mean.clone(), &cov).unwrap();
        let l = psd_factor(&cov).unwrap();
        let mut r1 = rng(3);
        let mut r2 = rng(3);
        let x = mvn.sample(&mut r1);
        let mut eps = vec![0.0; 4];
        fill_standard_normal(&mut r2, &mut eps);
        let dense = mean + l * DVector::from_vec(eps);
        assert!((x - dense).abs().max() < 1e-14);
    }
}
